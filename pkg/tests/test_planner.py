from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from moeplan.config import SloSpec
from moeplan.perf import baseline_cost, evaluate, mix_main_spec
from moeplan.planner.dual import InfeasibleError
from moeplan.planner.mmp import evaluate_ratio, mmp_preallocate, ratio_ladder
from moeplan.planner.pipeline import plan, select_remote
from moeplan.planner.worst import views_uniform, wc_tpot, wc_ttft

HARD = ("10c", "10e", "10f", "10g", "10h", "10i")


# -- expert selection ---------------------------------------------------------

def test_select_remote_worked_example():
    act = np.array([[0.4, 0.3, 0.2, 0.1]])
    flags = select_remote(act, 0.5, 32, 16, 1)
    assert set(np.flatnonzero(flags[0])) == {2, 3}
    assert not select_remote(act, 0.0, 32, 16, 1)[0].any()
    assert select_remote(act, 1.0, 32, 16, 1)[0].all()


def test_select_remote_ties_go_to_lower_index():
    flags = select_remote(np.full((1, 4), 0.25), 0.5, 10, 10, 1)
    assert np.flatnonzero(flags[0]).tolist() == [0, 1]


def test_select_remote_is_minimal_utility_set():
    rng = np.random.default_rng(0)
    for _ in range(30):
        K = int(rng.integers(2, 13))
        act = rng.dirichlet(np.ones(K), size=1)
        b = float(rng.uniform(0, 1))
        n_in, n_out, k = 50, 20, 2
        u = n_in * act[0] + n_out * k * act[0]
        f = select_remote(act, b, n_in, n_out, k)[0]
        m = int(f.sum())
        assert m == math.floor(b * K + 1e-9)
        best = min(sum(u[list(c)]) for c in itertools.combinations(range(K), m)) if m else 0.0
        assert u[f].sum() == pytest.approx(best, abs=1e-12)


def test_select_remote_rejects_bad_ratio():
    with pytest.raises(ValueError):
        select_remote(np.full((1, 4), 0.25), 1.5, 1, 1, 1)


# -- main-model pre-allocation ------------------------------------------------

def test_ratio_ladder():
    assert ratio_ladder(0.25) == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert ratio_ladder(0.3)[-1] == 0.0


def _sweep_oracle(cfg, n_in, n_out, eps):
    """Largest ratio with some grid spec >= its memory floor that meets both SLOs, then the smallest such spec."""
    model, platform, slo = cfg.model, cfg.platform, cfg.slo
    D = model.token_embedding_bytes
    top = platform.num_remote_specs - 1
    for b in ratio_ladder(eps):
        views = views_uniform(cfg, b, n_in)
        local = sum(int(np.sort(model.expert_memory_bytes[l])[::-1][:v.m_loc].sum()) for l, v in enumerate(views))
        floor = max(D * (n_in + n_out) + local, evaluate_ratio(cfg, b, n_in, n_out)["m_cal"])
        zs = [max(1, min(platform.max_replicas, v.m_rem)) for v in views]
        for w, mem in enumerate(platform.memory_grid_main):
            if mem < floor:
                continue
            ys = [top] * model.num_layers
            if (wc_ttft(cfg, views, w, ys, zs, n_in, n_out) <= slo.ttft_limit_seconds
                    and wc_tpot(cfg, views, w, ys, n_out) <= slo.tpot_limit_seconds):
                return w, b
    return None


@pytest.mark.parametrize("n_in", [64, 128, 512])
def test_mmp_matches_exhaustive_sweep(small_cfg, n_in):
    eps = 1 / 8
    res = mmp_preallocate(small_cfg, n_in, 200, eps)
    assert (res.main_mem_spec, res.remote_ratio) == _sweep_oracle(small_cfg, n_in, 200, eps)


def test_mmp_loose_slo_goes_all_remote(small_cfg):
    cfg = small_cfg._replace(slo=SloSpec(1e6, 1e6))
    res = mmp_preallocate(cfg, 128, 200)
    assert res.remote_ratio == 1.0
    need = cfg.model.token_embedding_bytes * (128 + 200)
    assert res.main_mem_spec == cfg.platform.main_spec_at_least(need)


def test_mmp_impossible_tpot(small_cfg):
    floor = sum(small_cfg.model.non_expert_decode_seconds)
    cfg = small_cfg._replace(slo=SloSpec(5.0, 0.5 * floor))
    with pytest.raises(InfeasibleError) as exc:
        mmp_preallocate(cfg, 128, 200)
    assert exc.value.constraint == "10d" and "TPOT" in str(exc.value)


def test_mmp_trajectory_steps_down(small_cfg):
    res = mmp_preallocate(small_cfg, 128, 200)
    bs = [r["b"] for r in res.trajectory]
    assert bs[0] == 1.0 and bs[-1] == res.remote_ratio
    assert all(b < a for a, b in zip(bs, bs[1:]))


# -- full pipeline ------------------------------------------------------------

def _act(cfg, seed, conc=1.0):
    rng = np.random.default_rng(seed)
    K = cfg.model.experts_per_layer[0]
    return rng.dirichlet(np.full(K, conc), size=cfg.model.num_layers)


@pytest.mark.parametrize("seed", range(5))
def test_plan_constraints_hold(small_cfg, seed):
    act = _act(small_cfg, seed)
    res = plan(small_cfg, act, 128, 200)
    flags = res.report.constraint_flags
    assert all(flags[c].passed for c in HARD)
    assert res.ttft_wc <= small_cfg.slo.ttft_limit_seconds
    assert res.tpot_wc <= small_cfg.slo.tpot_limit_seconds
    # expected-mode numbers sit below the worst-case ones
    assert res.report.latency.tpot <= res.tpot_wc
    assert res.report.latency.ttft <= res.ttft_wc
    assert res.report.total == evaluate(res.plan, small_cfg, act, 128, 200).total


def test_plan_is_deterministic(small_cfg):
    act = _act(small_cfg, 7)
    a, b = plan(small_cfg, act, 128, 200), plan(small_cfg, act, 128, 200)
    assert a.plan.to_dict() == b.plan.to_dict()
    assert a.stage_log == b.stage_log


def test_plan_stage_log_covers_every_stage(small_cfg):
    res = plan(small_cfg, _act(small_cfg, 1), 128, 200)
    stages = {r[0] for r in res.stage_log}
    assert {"mmp", "select", "fit", "dual", "replicas", "final"} <= stages


def test_all_local_plan_equals_mix(small_cfg):
    # a tight TPOT drives the ratio to zero: the plan is then the MIX deployment
    act = _act(small_cfg, 2)
    b0 = evaluate_ratio(small_cfg, 0.0, 128, 200)
    b1 = evaluate_ratio(small_cfg, 1 / 8, 128, 200)
    tpot = 0.5 * (b0["tpot_wc"] + b1["tpot_wc"])
    cfg = small_cfg._replace(slo=SloSpec(small_cfg.slo.ttft_limit_seconds, tpot))
    res = plan(cfg, act, 128, 200)
    assert res.mmp.remote_ratio == 0.0
    assert res.report.remote_prefill_cost == res.report.remote_decode_cost == 0.0
    mix = baseline_cost("MIX", cfg, act, 128, 200)
    assert res.plan.main_mem_spec == mix_main_spec(cfg.model, cfg.platform, 128, 200)
    assert res.report.total == mix.total


def test_plan_names_failing_stage(small_cfg):
    cfg = small_cfg._replace(slo=SloSpec(5.0, 1e-4))
    with pytest.raises(InfeasibleError) as exc:
        plan(cfg, _act(cfg, 0), 128, 200)
    assert exc.value.stage == "mmp"


def test_plan_rejects_bad_inputs(small_cfg):
    with pytest.raises(ValueError):
        plan(small_cfg, _act(small_cfg, 0), 0, 200)
    with pytest.raises(ValueError):
        plan(small_cfg, np.full((12, 8), 0.2), 128, 200)


def test_large_plan_beats_baselines(large_cfg):
    rng = np.random.default_rng(0)
    act = rng.dirichlet(np.full(64, 0.5), size=27)
    res = plan(large_cfg, act, 128, 200)
    assert all(res.report.constraint_flags[c].passed for c in HARD)
    for kind in ("CPU", "GPU", "MIX", "FETCH"):
        assert res.report.total < baseline_cost(kind, large_cfg, act, 128, 200).total
