"""Remote-memory sizing by Lagrangian duality.

Relaxing each layer's remote memory spec to a continuous ``y`` (GB) turns
the decode-dominated cost into a separable convex program

    minimize   sum_l (1+eta) * (s_l*T_l(y_l) + t_l) * (H + c*y_l)
    subject to sum_l a_l*T_l(y_l) <= budget         (worst-case TPOT)
               lo_l <= y_l <= hi                     (grid range, memory floor)

Only the TPOT row couples layers, so the dual has a single multiplier. For
a fixed multiplier every layer is a strictly convex 1-D problem, solved by
safeguarded Newton; the dual derivative is monotone in the multiplier, so
the multiplier itself is found by bisection. Box multipliers follow from
stationarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..config import GB, PlatformSpec
from .fitting import FitError, FittedCurve, convexity_check


class InfeasibleError(RuntimeError):
    """No plan meets the SLOs; ``constraint`` names the binding one."""

    def __init__(self, message: str, constraint: str = "", stage: str = ""):
        super().__init__(message)
        self.constraint = constraint
        self.stage = stage


@dataclass(frozen=True)
class TpotCoupling:
    """``sum_l weights[l] * T_l(y_l) <= budget``."""
    weights: tuple[float, ...]
    budget: float


@dataclass
class DualSolution:
    y_tilde: np.ndarray            # GB
    lambdas: np.ndarray            # (L, 4): tpot, m_1 floor, top spec, memory requirement
    objective_value: float
    dual_value: float
    kkt_residual: float
    specs: tuple[int, ...] = ()
    rounded_objective: float = float("nan")
    trajectory: list[tuple[float, float]] = field(default_factory=list)   # (lambda, constraint value)

    @property
    def duality_gap(self) -> float:
        return abs(self.objective_value - self.dual_value)


@dataclass(frozen=True)
class _Layer:
    curve: FittedCurve
    s: float
    t: float
    lo: float
    hi: float
    a: float


def _phi_prime(L: _Layer, y: float, A: float, H: float, c: float, lam: float) -> float:
    T, dT = float(L.curve(y)), float(L.curve.d1(y))
    return A * (L.s * dT * (H + c * y) + c * (L.s * T + L.t)) + lam * L.a * dT


def _phi_second(L: _Layer, y: float, A: float, H: float, c: float, lam: float) -> float:
    dT, d2T = float(L.curve.d1(y)), float(L.curve.d2(y))
    return A * L.s * (d2T * (H + c * y) + 2 * c * dT) + lam * L.a * d2T


def _inner(L: _Layer, A, H, c, lam, tol=1e-13) -> float:
    """argmin over [lo, hi] of the layer Lagrangian; derivative is increasing."""
    if _phi_prime(L, L.lo, A, H, c, lam) >= 0:
        return L.lo
    if _phi_prime(L, L.hi, A, H, c, lam) <= 0:
        return L.hi
    a, b = L.lo, L.hi
    y = 0.5 * (a + b)
    for _ in range(200):
        d = _phi_prime(L, y, A, H, c, lam)
        if d > 0:
            b = y
        else:
            a = y
        h = _phi_second(L, y, A, H, c, lam)
        step = y - d / h if h > 0 else np.nan
        y = step if a < step < b else 0.5 * (a + b)
        if b - a <= tol * max(1.0, abs(y)):
            break
    return y


def _objective(layers: Sequence[_Layer], y: np.ndarray, A, H, c) -> float:
    return float(sum(A * (L.s * float(L.curve(v)) + L.t) * (H + c * v) for L, v in zip(layers, y)))


def optimize_remote_memory(curves: Sequence[FittedCurve], s_tilde_remote: Sequence[float],
                           t_rem: Sequence[float], Hw: float, platform: PlatformSpec,
                           tpot: TpotCoupling | None = None, eta: float = 0.1,
                           min_memory_gb: Sequence[float] | None = None,
                           tol: float = 1e-12) -> tuple[DualSolution, tuple[int, ...]]:
    """Continuous optimum, its multipliers, and the grid specs it rounds up to.

    ``s_tilde_remote[l]`` scales the fitted time in the objective and
    ``t_rem[l]`` is the memory-independent per-token time; ``Hw`` is the main
    model's cost per second and the remote price per GB-second comes from
    ``platform``.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    L = len(curves)
    if not (len(s_tilde_remote) == len(t_rem) == L):
        raise ValueError("curves, s_tilde_remote and t_rem must have one entry per layer")
    grid = np.array(platform.memory_grid_remote, float) / GB
    lo_grid, hi = float(grid[0]), float(grid[-1])
    floor = np.full(L, lo_grid) if min_memory_gb is None else np.maximum(lo_grid, np.asarray(min_memory_gb, float))
    if np.any(floor > hi * (1 + 1e-12)):
        l = int(np.argmax(floor))
        raise InfeasibleError(f"layer {l}: remote weights and token data need {floor[l]:.3f} GB, above the "
                              f"largest remote spec", "10e", "memory")
    A = 1.0 + eta
    c = platform.cpu_price_per_mb_second * (GB / (1 << 20))
    weights = np.zeros(L) if tpot is None else np.asarray(tpot.weights, float)
    layers = [_Layer(cv, float(s), float(t), float(f), hi, float(a))
              for cv, s, t, f, a in zip(curves, s_tilde_remote, t_rem, floor, weights)]
    for j, ly in enumerate(layers):
        threshold, _ = convexity_check(ly.curve, Hw, c)
        if ly.s > 0 and threshold >= ly.lo:
            raise FitError(f"layer {j}: planning cost is not convex on [{ly.lo:.3f}, {hi:.3f}] GB "
                           f"(second-derivative zero at {threshold:.3f} GB); restrict the memory domain "
                           f"above that point")

    def solve(lam):
        return np.array([_inner(ly, A, H=Hw, c=c, lam=lam) for ly in layers])

    def constraint(y):
        return float(sum(ly.a * float(ly.curve(v)) for ly, v in zip(layers, y)))

    trajectory = []
    lam = 0.0
    y = solve(0.0)
    budget = np.inf if tpot is None else tpot.budget
    if tpot is not None:
        trajectory.append((0.0, constraint(y)))
        if constraint(np.full(L, hi)) > budget * (1 + 1e-12):
            raise InfeasibleError("worst-case TPOT cannot be met even with every remote layer at the "
                                  "largest spec", "10d", "memory")
        if constraint(y) > budget:
            lo_l, hi_l = 0.0, 1.0
            while constraint(solve(hi_l)) > budget:
                hi_l *= 4.0
                trajectory.append((hi_l, constraint(solve(hi_l))))
            for _ in range(200):
                mid = 0.5 * (lo_l + hi_l)
                val = constraint(solve(mid))
                trajectory.append((mid, val))
                if val > budget:
                    lo_l = mid
                else:
                    hi_l = mid
                if hi_l - lo_l <= tol * max(hi_l, 1e-300):
                    break
            lam = hi_l
            y = solve(lam)

    # box multipliers from stationarity
    lambdas = np.zeros((L, 4))
    lambdas[:, 0] = lam
    resid = 0.0
    for j, (ly, v) in enumerate(zip(layers, y)):
        d = _phi_prime(ly, v, A, Hw, c, lam)
        scale = max(abs(A * c * (ly.s * float(ly.curve(v)) + ly.t)), abs(A * ly.s * float(ly.curve.d1(v)) * Hw), 1e-300)
        if v <= ly.lo and d >= 0:
            lambdas[j, 3 if ly.lo > lo_grid else 1] = d
        elif v >= ly.hi and d <= 0:
            lambdas[j, 2] = -d
        else:
            resid = max(resid, abs(d) / scale)
    if tpot is not None:
        g_val = constraint(y) - budget
        resid = max(resid, max(g_val, 0.0) / max(abs(budget), 1e-300),
                    abs(lam * g_val) / max(_objective(layers, y, A, Hw, c), 1e-300))
    primal = _objective(layers, y, A, Hw, c)
    # dual function at the multipliers: Lagrangian minimised over the box
    dual = primal + (lam * (constraint(y) - budget) if tpot is not None else 0.0)

    specs = _round_up(layers, y, grid, tpot, A, Hw, c)
    sol = DualSolution(y, lambdas, primal, dual, resid, specs,
                       _objective(layers, grid[list(specs)], A, Hw, c), trajectory)
    return sol, specs


def _round_up(layers, y, grid, tpot, A, H, c) -> tuple[int, ...]:
    """Round each continuous size up to the grid, then restore the TPOT row if the fit misled it."""
    specs = [int(min(np.searchsorted(grid, v * (1 - 1e-12), side="left"), len(grid) - 1)) for v in y]
    if tpot is None:
        return tuple(specs)

    def cons(sp):
        return sum(ly.a * float(ly.curve(grid[v])) for ly, v in zip(layers, sp))

    while cons(specs) > tpot.budget * (1 + 1e-12):
        best, best_ratio = None, -np.inf
        for j, ly in enumerate(layers):
            v = specs[j]
            if v + 1 >= len(grid) or ly.a == 0:
                continue
            gain = ly.a * float(ly.curve(grid[v]) - ly.curve(grid[v + 1]))
            extra = A * ((ly.s * float(ly.curve(grid[v + 1])) + ly.t) * (H + c * grid[v + 1])
                         - (ly.s * float(ly.curve(grid[v])) + ly.t) * (H + c * grid[v]))
            ratio = gain / max(extra, 1e-300)
            if ratio > best_ratio:
                best, best_ratio = j, ratio
        if best is None:
            raise InfeasibleError("rounded memory specs cannot meet worst-case TPOT", "10d", "memory")
        specs[best] += 1
    return tuple(specs)
