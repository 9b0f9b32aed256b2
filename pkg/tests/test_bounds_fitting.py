from __future__ import annotations

import math

import numpy as np
import pytest

from moeplan.planner.bounds import BoundError, worst_case_count, worst_case_tokens
from moeplan.planner.fitting import (FitError, FittedCurve, convexity_check, fit_curve, fit_exponential, g,
                                     g_prime, g_second)
from moeplan.planner.mmp import mmp_preallocate
from moeplan.planner.pipeline import main_rate
from moeplan.sim import token_bound_violation_rate

THETA = (2.0, 3.0, 0.5)
Y_EXACT = np.linspace(0.1, 2.0, 20)
Y_NOISY = np.linspace(0.1, 2.0, 181)


def _model(y, th=THETA):
    return th[0] * np.exp(-th[1] * y) + th[2]


# -- token bounds -------------------------------------------------------------

def test_theorem_value():
    assert worst_case_tokens(8, 1, 8) == pytest.approx(math.sqrt(24) / 2 + 1, abs=1e-12)
    assert round(worst_case_tokens(8, 1, 8), 4) == 3.4495


def test_full_aggregation_is_vacuous():
    for n in (1, 10, 1000):
        assert worst_case_tokens(n, 8, 8) >= n


def test_bound_errors():
    with pytest.raises(BoundError):
        worst_case_tokens(8, 9, 8)
    with pytest.raises(BoundError):
        worst_case_tokens(0, 1, 8)


def test_worst_case_count_capped():
    assert worst_case_count(0.0, 100) == 0.0
    assert worst_case_count(99.0, 100) == 100
    assert worst_case_count(10.0, 100) == pytest.approx(10 + math.sqrt(300) / 2)


def test_single_expert_monte_carlo():
    rng = np.random.default_rng(0)
    assert token_bound_violation_rate(256, 8, 1, 10_000, rng) <= 0.05


# -- curve fitting ------------------------------------------------------------

def test_exact_recovery():
    fit = fit_exponential(Y_EXACT, _model(Y_EXACT))
    for got, want in zip((fit.theta1, fit.theta2, fit.theta3), THETA):
        assert abs(got - want) / want <= 1e-6


def test_noisy_recovery():
    rng = np.random.default_rng(0)
    t = _model(Y_NOISY) * (1 + 0.01 * rng.normal(size=Y_NOISY.size))
    fit = fit_exponential(Y_NOISY, t)
    for got, want in zip((fit.theta1, fit.theta2, fit.theta3), THETA):
        assert abs(got - want) / want <= 0.02


def test_fit_is_deterministic():
    t = _model(Y_EXACT) * (1 + 0.01 * np.sin(np.arange(20)))
    assert fit_exponential(Y_EXACT, t) == fit_exponential(Y_EXACT, t)


def test_constant_samples_flagged_flat():
    try:
        fit = fit_exponential(Y_EXACT, np.full(20, 0.7))
    except FitError:
        return
    assert fit.flat
    assert fit(Y_EXACT) == pytest.approx(0.7, rel=1e-6)


def test_fit_errors():
    with pytest.raises(FitError, match=">= 4"):
        fit_exponential([0.1, 0.2, 0.3], [1.0, 0.9, 0.8])
    y = np.linspace(0.1, 2.0, 12)
    with pytest.raises(FitError, match="exponential"):
        fit_exponential(y, np.where(np.arange(12) % 2, 1.0, 0.1))


def test_preset_fit_is_decreasing(small_cfg):
    fit = fit_curve(small_cfg.profile, 3, small_cfg.platform)
    y = np.linspace(*fit.domain, 50)
    assert np.all(np.diff(fit(y)) < 0)
    assert fit.residual_rms < 0.01 * fit.theta3


# -- convexity and derivatives ------------------------------------------------

def _central(curve, y, Hw, cc, t):
    h = 1e-6 * y
    return (float(g(curve, y + h, Hw, cc, t)) - float(g(curve, y - h, Hw, cc, t))) / (2 * h)


@pytest.mark.parametrize("preset", ["small-8x12", "large-64x27", "toy-6x3"])
def test_g_prime_matches_finite_differences(preset):
    from moeplan.presets import preset_config
    cfg = preset_config(preset)
    cc = cfg.platform.cpu_price_per_mb_second * 1024
    mmp = mmp_preallocate(cfg, 128, 200)
    Hw = main_rate(cfg, mmp.main_mem_spec, 128, 200)
    rng = np.random.default_rng(1)
    for _ in range(100):
        l = int(rng.integers(cfg.model.num_layers))
        curve = fit_curve(cfg.profile, l, cfg.platform)
        y = float(rng.uniform(*curve.domain))
        t = float(rng.uniform(0, 1e-3))
        a = float(g_prime(curve, y, Hw, cc, t))
        assert abs(_central(curve, y, Hw, cc, t) - a) <= 1e-6 * abs(a)


def test_g_second_zero_matches_threshold():
    rng = np.random.default_rng(2)
    for _ in range(50):
        curve = FittedCurve(rng.uniform(1e-3, 1e-2), rng.uniform(0.5, 5.0), 1e-4, (0.1, 4.0), 0.0)
        cc = 1.7e-5
        Hw = cc * rng.uniform(0.01, 0.3)
        threshold, convex = convexity_check(curve, Hw, cc)
        assert not convex
        # g'' changes sign exactly at the threshold: bisection on its sign
        a, b = threshold - 1.0, threshold + 1.0
        assert g_second(curve, a, Hw, cc) < 0 < g_second(curve, b, Hw, cc)
        for _ in range(200):
            m = 0.5 * (a + b)
            if g_second(curve, m, Hw, cc) < 0:
                a = m
            else:
                b = m
        assert abs(0.5 * (a + b) - threshold) <= 1e-9


def test_g_second_matches_finite_differences_of_g_prime():
    curve = FittedCurve(2e-3, 4.0, 3e-4, (0.1, 2.0), 0.0)
    Hw, cc = 1e-4, 1.7e-5
    for y in np.linspace(0.2, 1.8, 9):
        h = 1e-6
        fd = (float(g_prime(curve, y + h, Hw, cc)) - float(g_prime(curve, y - h, Hw, cc))) / (2 * h)
        assert fd == pytest.approx(float(g_second(curve, y, Hw, cc)), rel=1e-6)


def test_threshold_boundary():
    curve = FittedCurve(1e-3, 4.0, 1e-4, (0.1, 1.0), 0.0)
    cc = 2e-5
    threshold, convex = convexity_check(curve, Hw=cc * 2 / 4.0, cc=cc)
    assert threshold == 0.0 and convex


@pytest.mark.parametrize("theta2, ratio", [(2.4363, 0.25), (11.8665, 2.72)])
def test_reported_regimes_are_convex(theta2, ratio):
    cc = 1.6276e-5
    Hw = 2 * cc / ratio
    threshold, convex = convexity_check(FittedCurve(5e-3, theta2, 6e-4, (0.1, 5.0), 0.0), Hw, cc)
    assert convex and threshold < 0


def test_convexity_check_rejects_non_positive_prices():
    with pytest.raises(FitError):
        convexity_check(FittedCurve(1.0, 1.0, 1.0, (0, 1), 0.0), 0.0, 1.0)
