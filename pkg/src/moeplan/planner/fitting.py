"""Exponential-decay model of expert time versus remote memory.

Single-token expert time falls with allocated memory (vCPUs scale with it)
and levels off: ``T(y) = theta1 * exp(-theta2 * y) + theta3`` with ``y`` in
GB. The per-layer planning cost ``g(y) = (T(y) + t) * (H + c*y)`` is then
convex beyond ``2/theta2 - H/c``, which is everywhere positive-memory when
``theta2 >= 2c/H``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from ..config import GB, ExpertLatencyProfile, PlatformSpec

MIN_SAMPLES = 4
MAX_RELATIVE_RMS = 0.20
THETA_FLOOR = 1e-12


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FittedCurve:
    theta1: float
    theta2: float
    theta3: float
    domain: tuple[float, float]       # (m_1, m_top) in GB
    residual_rms: float
    flat: bool = False

    def __post_init__(self):
        if min(self.theta1, self.theta2, self.theta3) <= 0:
            raise FitError("theta values must be strictly positive")

    def __call__(self, y):
        return self.theta1 * np.exp(-self.theta2 * np.asarray(y, float)) + self.theta3

    def d1(self, y):
        return -self.theta1 * self.theta2 * np.exp(-self.theta2 * np.asarray(y, float))

    def d2(self, y):
        return self.theta1 * self.theta2 ** 2 * np.exp(-self.theta2 * np.asarray(y, float))

    def to_dict(self) -> dict:
        return {"theta1": self.theta1, "theta2": self.theta2, "theta3": self.theta3,
                "domain_gb": list(self.domain), "residual_rms": self.residual_rms, "flat": self.flat}

    @classmethod
    def from_dict(cls, d: dict) -> "FittedCurve":
        return cls(d["theta1"], d["theta2"], d["theta3"], tuple(d["domain_gb"]), d["residual_rms"], d.get("flat", False))


def _profile_inner(y, t, rate):
    """Best (theta1, theta3) for a fixed decay rate, by linear least squares."""
    A = np.column_stack([np.exp(-rate * y), np.ones_like(y)])
    coef, *_ = np.linalg.lstsq(A, t, rcond=None)
    return coef, float(np.sum((A @ coef - t) ** 2))


def fit_exponential(y_gb, seconds) -> FittedCurve:
    """Bounded nonlinear least squares for ``theta1*exp(-theta2*y) + theta3``.

    A coarse scan over the decay rate (with the two linear parameters solved
    exactly) seeds a trust-region refinement, which keeps the fit
    deterministic and away from poor local minima.
    """
    y = np.asarray(y_gb, float)
    t = np.asarray(seconds, float)
    if y.size < MIN_SAMPLES or y.shape != t.shape:
        raise FitError(f"need >= {MIN_SAMPLES} (memory, time) samples, got {y.size}")
    span = float(y.max() - y.min())
    if span <= 0:
        raise FitError("samples must cover more than one memory size")
    mean = float(np.mean(t))

    rates = np.geomspace(0.01 / span, 200.0 / span, 400)
    best = min(rates, key=lambda r: _profile_inner(y, t, r)[1])
    (a, c), _ = _profile_inner(y, t, best)
    x0 = np.array([max(a, 1e-6 * mean + THETA_FLOOR), best, max(c, 1e-6 * mean + THETA_FLOOR)])

    def resid(p):
        return p[0] * np.exp(-p[1] * y) + p[2] - t

    def jac(p):
        e = np.exp(-p[1] * y)
        return np.column_stack([e, -p[0] * y * e, np.ones_like(y)])

    sol = least_squares(resid, x0, jac=jac, bounds=(THETA_FLOOR, np.inf), method="trf",
                        x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000)
    th = sol.x
    rms = float(np.sqrt(np.mean(resid(th) ** 2)))
    if rms > MAX_RELATIVE_RMS * mean:
        raise FitError(f"fit residual RMS {rms:.3g} exceeds {MAX_RELATIVE_RMS:.0%} of the mean time "
                       f"{mean:.3g}; the profile does not look exponential")
    # a curve whose decaying part is negligible across the domain carries no memory signal
    flat = bool(th[0] * (np.exp(-th[1] * y.min()) - np.exp(-th[1] * y.max())) <= 1e-9 * mean)
    return FittedCurve(float(th[0]), float(th[1]), float(th[2]), (float(y.min()), float(y.max())), rms, flat)


def fit_curve(profile: ExpertLatencyProfile, layer: int, platform: PlatformSpec) -> FittedCurve:
    """Fit layer ``layer``'s single-token expert time over the remote memory grid."""
    y = np.array(platform.memory_grid_remote, float) / GB
    t = profile.single_token_table()[layer, :len(y)]
    try:
        return fit_exponential(y, t)
    except FitError as exc:
        raise FitError(f"layer {layer}: {exc}") from None


def convexity_check(curve: FittedCurve, Hw: float, cc: float) -> tuple[float, bool]:
    """Zero of g'' and whether g is convex for every positive memory size.

    ``Hw`` is the main model's cost per second and ``cc`` the price per
    second of one unit of ``y`` (GB).
    """
    if Hw <= 0 or cc <= 0:
        raise FitError("Hw and cc must be positive")
    threshold = 2.0 / curve.theta2 - Hw / cc
    return threshold, bool(curve.theta2 >= 2.0 * cc / Hw)


def g(curve: FittedCurve, y, Hw: float, cc: float, t: float = 0.0):
    """Per-layer planning cost ``(T(y) + t) * (Hw + cc*y)``."""
    y = np.asarray(y, float)
    return (curve(y) + t) * (Hw + cc * y)


def g_prime(curve: FittedCurve, y, Hw: float, cc: float, t: float = 0.0):
    th1, th2, th3 = curve.theta1, curve.theta2, curve.theta3
    y = np.asarray(y, float)
    return (cc * th1 - cc * th1 * th2 * y - Hw * th1 * th2) * np.exp(-th2 * y) + cc * (th3 + t)


def g_second(curve: FittedCurve, y, Hw: float, cc: float):
    th1, th2 = curve.theta1, curve.theta2
    y = np.asarray(y, float)
    return cc * th1 * th2 ** 2 * np.exp(-th2 * y) * (y - (2.0 / th2 - Hw / cc))
