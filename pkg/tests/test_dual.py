from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.optimize import minimize, minimize_scalar

from moeplan.config import GB, MB
from moeplan.planner.dual import InfeasibleError, TpotCoupling, optimize_remote_memory
from moeplan.planner.fitting import FitError, FittedCurve
from moeplan.presets import default_platform

PLATFORM = default_platform("small-8x12")
C = PLATFORM.cpu_price_per_mb_second * GB / MB        # price per GB-second
GRID = np.array(PLATFORM.memory_grid_remote, float) / GB
ETA = 0.1


def random_instance(rng, L, binding=True):
    curves = [FittedCurve(rng.uniform(1e-3, 5e-3), rng.uniform(2.0, 12.0), rng.uniform(2e-4, 8e-4),
                          (GRID[0], GRID[-1]), 0.0) for _ in range(L)]
    s = rng.uniform(0.05, 0.5, L)
    t = rng.uniform(0.0, 5e-4, L)
    H = C * rng.uniform(2.0, 30.0)
    a = rng.uniform(0.5, 3.0, L)
    at_top = sum(ai * float(cv(GRID[-1])) for ai, cv in zip(a, curves))
    at_bottom = sum(ai * float(cv(GRID[0])) for ai, cv in zip(a, curves))
    frac = rng.uniform(0.05, 0.6) if binding else 1.5
    budget = at_top + frac * (at_bottom - at_top)
    return curves, s, t, H, TpotCoupling(tuple(a), budget)


def objective(curves, s, t, H, y):
    return sum((1 + ETA) * (si * float(cv(v)) + ti) * (H + C * v) for cv, si, ti, v in zip(curves, s, t, y))


def tpot_row(curves, tp, y):
    return sum(ai * float(cv(v)) for ai, cv, v in zip(tp.weights, curves, y))


def scipy_primal(curves, s, t, H, tp):
    L = len(curves)
    best = None
    for start in (GRID[0], 0.5 * (GRID[0] + GRID[-1]), GRID[-1]):
        res = minimize(lambda y: objective(curves, s, t, H, y), np.full(L, start), method="SLSQP",
                       bounds=[(GRID[0], GRID[-1])] * L,
                       constraints=[{"type": "ineq", "fun": lambda y: tp.budget - tpot_row(curves, tp, y)}],
                       options={"ftol": 1e-16, "maxiter": 1000})
        if tpot_row(curves, tp, res.x) <= tp.budget * (1 + 1e-9) and (best is None or res.fun < best):
            best = res.fun
    return best


def scipy_dual(curves, s, t, H, tp):
    def inner(lam):
        total = -lam * tp.budget
        for cv, si, ti, ai in zip(curves, s, t, tp.weights):
            f = lambda y: (1 + ETA) * (si * float(cv(y)) + ti) * (H + C * y) + lam * ai * float(cv(y))
            r = minimize_scalar(f, bounds=(GRID[0], GRID[-1]), method="bounded", options={"xatol": 1e-12})
            total += min(r.fun, f(GRID[0]), f(GRID[-1]))
        return total

    hi = 1.0
    while inner(2 * hi) > inner(hi):
        hi *= 2
    r = minimize_scalar(lambda lam: -inner(lam), bounds=(0.0, 2 * hi), method="bounded",
                        options={"xatol": 1e-14 * hi})
    return max(-r.fun, inner(0.0))


@pytest.mark.parametrize("seed", range(50))
def test_duality_gap_against_independent_solvers(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 6))
    curves, s, t, H, tp = random_instance(rng, L, binding=seed % 5 != 0)
    sol, _ = optimize_remote_memory(curves, s, t, H, PLATFORM, tpot=tp, eta=ETA)
    P = sol.objective_value
    assert sol.duality_gap <= 1e-5 * P
    assert np.all(sol.lambdas >= 0)
    assert sol.kkt_residual <= 1e-6
    assert tpot_row(curves, tp, sol.y_tilde) <= tp.budget * (1 + 1e-9)
    primal = scipy_primal(curves, s, t, H, tp)
    dual = scipy_dual(curves, s, t, H, tp)
    assert P <= primal * (1 + 1e-5)
    assert abs(P - dual) <= 1e-5 * P
    assert dual <= primal * (1 + 1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_rounded_solution_against_exhaustive_grid(seed):
    rng = np.random.default_rng(100 + seed)
    L = int(rng.integers(1, 4))
    curves, s, t, H, tp = random_instance(rng, L)
    sol, specs = optimize_remote_memory(curves, s, t, H, PLATFORM, tpot=tp, eta=ETA)
    assert tpot_row(curves, tp, GRID[list(specs)]) <= tp.budget * (1 + 1e-12)
    best = min(objective(curves, s, t, H, GRID[list(c)])
               for c in itertools.product(range(len(GRID)), repeat=L)
               if tpot_row(curves, tp, GRID[list(c)]) <= tp.budget)
    assert sol.rounded_objective == pytest.approx(objective(curves, s, t, H, GRID[list(specs)]), rel=1e-12)
    assert sol.rounded_objective <= 1.05 * best
    assert sol.rounded_objective >= best * (1 - 1e-12)


def _scan_argmin(curve, s, t, H):
    ys = np.arange(GRID[0], GRID[-1] + 1e-12, 1e-4)
    return ys[np.argmin([(1 + ETA) * (s * float(curve(y)) + t) * (H + C * y) for y in ys])]


@pytest.mark.parametrize("t", [0.0, 2e-4, 5e-2])
def test_single_layer_matches_dense_scan(t):
    curve = FittedCurve(3e-3, 6.0, 4e-4, (GRID[0], GRID[-1]), 0.0)
    H = 5 * C
    sol, _ = optimize_remote_memory([curve], [0.3], [t], H, PLATFORM, eta=ETA)
    assert abs(sol.y_tilde[0] - _scan_argmin(curve, 0.3, t, H)) <= 1e-4
    assert sol.lambdas[0, 0] == 0.0


def test_larger_fixed_time_pulls_memory_down():
    curve = FittedCurve(3e-3, 6.0, 4e-4, (GRID[0], GRID[-1]), 0.0)
    ys = [optimize_remote_memory([curve], [0.3], [t], 5 * C, PLATFORM, eta=ETA)[0].y_tilde[0]
          for t in (0.0, 1e-3, 1e-2, 1e-1)]
    assert all(b <= a + 1e-12 for a, b in zip(ys, ys[1:]))


def test_infeasible_tpot():
    curve = FittedCurve(3e-3, 6.0, 4e-4, (GRID[0], GRID[-1]), 0.0)
    with pytest.raises(InfeasibleError) as exc:
        optimize_remote_memory([curve], [0.3], [0.0], 5 * C, PLATFORM, tpot=TpotCoupling((1.0,), 1e-4))
    assert exc.value.constraint == "10d"


def test_non_convex_domain_rejected():
    curve = FittedCurve(3e-3, 0.5, 4e-4, (GRID[0], GRID[-1]), 0.0)
    with pytest.raises(FitError, match="not convex"):
        optimize_remote_memory([curve], [0.3], [0.0], 0.01 * C, PLATFORM)


def test_memory_floor_respected():
    curve = FittedCurve(3e-3, 6.0, 4e-4, (GRID[0], GRID[-1]), 0.0)
    sol, specs = optimize_remote_memory([curve], [0.3], [0.05], 5 * C, PLATFORM, min_memory_gb=[1.0])
    assert sol.y_tilde[0] >= 1.0 - 1e-12
    assert GRID[specs[0]] >= 1.0
    with pytest.raises(InfeasibleError):
        optimize_remote_memory([curve], [0.3], [0.05], 5 * C, PLATFORM, min_memory_gb=[GRID[-1] + 0.5])
