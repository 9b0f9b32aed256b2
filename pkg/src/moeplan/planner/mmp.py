"""Main-model pre-allocation.

Before the request's experts are chosen, pick the main container's memory
and the fraction ``b`` of experts to push remote so that the worst-case
TTFT and TPOT hold. ``b`` starts at 1 (everything remote) and steps down
by ``epsilon``; the first ratio whose memory requirement meets both SLOs
wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import Config
from .dual import InfeasibleError
from .worst import LayerView, remote_token_time, views_uniform, wc_tpot, wc_ttft


@dataclass
class MMPResult:
    main_mem_spec: int
    remote_ratio: float
    memory_bytes: float
    ttft_wc: float
    tpot_wc: float
    trajectory: list[dict] = field(default_factory=list)


def ratio_ladder(epsilon: float) -> list[float]:
    """1, 1-eps, ..., down to 0 (inclusive when eps divides 1)."""
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    steps = int(math.floor(1.0 / epsilon + 1e-9))
    out = [1.0 - i * epsilon for i in range(steps + 1)]
    out = [max(0.0, b) if abs(b) > 1e-12 else 0.0 for b in out]
    if out[-1] > 0:
        out.append(0.0)
    return out


def default_epsilon(cfg: Config) -> float:
    return 1.0 / max(cfg.model.experts_per_layer)


def local_expert_bytes(cfg: Config, views: list[LayerView]) -> int:
    """Memory of the local experts, taking each layer's largest ones (selection is not known yet)."""
    total = 0
    for l, v in enumerate(views):
        sizes = np.sort(cfg.model.expert_memory_bytes[l])[::-1]
        total += int(sizes[:v.m_loc].sum())
    return total


def calibration_memory(cfg: Config, views: list[LayerView], n_in: int) -> float:
    """Smallest main memory at which no local expert is slower than a worst-case remote one.

    Compared per layer at the largest remote spec, for one decode token and
    for a worst-case prefill batch. Zero when no layer mixes both sides.
    """
    model, platform, profile = cfg.model, cfg.platform, cfg.profile
    top = platform.num_remote_specs - 1
    mixed = [l for l, v in enumerate(views) if v.m_loc and v.m_rem]
    if not mixed:
        return 0.0
    n = n_in * model.top_k
    D, B = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    for w, mem in enumerate(platform.memory_grid_main):
        ok = True
        for l in mixed:
            K = model.experts_per_layer[l]
            n_up = min(float(n_in), math.sqrt(3 * n) / 2 + n / K)
            rem_tok = remote_token_time(cfg, l, top)
            rem_pre = profile.batch(l, top, n_up) + 2 * D * n_up / B + platform.invocation_overhead_mean_seconds[l]
            if profile.single_token(l, w) > rem_tok or profile.batch(l, w, n_up) > rem_pre:
                ok = False
                break
        if ok:
            return float(mem)
    return float(platform.memory_grid_main[-1])


def evaluate_ratio(cfg: Config, b: float, n_in_max: int, n_out: int) -> dict:
    """Memory requirement and worst-case SLO estimates for remote ratio ``b``."""
    model, platform = cfg.model, cfg.platform
    views = views_uniform(cfg, b, n_in_max)
    m_min = model.token_embedding_bytes * (n_in_max + n_out)
    m_e = local_expert_bytes(cfg, views)
    m_cal = calibration_memory(cfg, views, n_in_max)
    M = max(m_min + m_e, m_cal)
    w = platform.main_spec_at_least(M)
    row = {"b": b, "m_min": m_min, "m_e": m_e, "m_cal": m_cal, "memory": M, "spec": w,
           "ttft_wc": math.inf, "tpot_wc": math.inf}
    if w is None:
        return row
    top = platform.num_remote_specs - 1
    L = model.num_layers
    zs = [max(1, min(platform.max_replicas, v.m_rem)) for v in views]
    row["ttft_wc"] = wc_ttft(cfg, views, w, [top] * L, zs, n_in_max, n_out)
    row["tpot_wc"] = wc_tpot(cfg, views, w, [top] * L, n_out)
    return row


def mmp_preallocate(cfg: Config, n_in_max: int, n_out: int, epsilon: float | None = None) -> MMPResult:
    """Largest remote ratio (stepping down from 1) whose worst case meets both SLOs."""
    slo = cfg.slo
    eps = default_epsilon(cfg) if epsilon is None else epsilon
    rows = []
    for b in ratio_ladder(eps):
        row = evaluate_ratio(cfg, b, n_in_max, n_out)
        row["ttft_ok"] = row["ttft_wc"] <= slo.ttft_limit_seconds
        row["tpot_ok"] = row["tpot_wc"] <= slo.tpot_limit_seconds
        rows.append(row)
        if row["ttft_ok"] and row["tpot_ok"]:
            return MMPResult(row["spec"], b, row["memory"], row["ttft_wc"], row["tpot_wc"], rows)
    last = rows[-1]
    fits = [r for r in rows if r["spec"] is not None]
    if not fits:
        raise InfeasibleError("no remote ratio fits the main memory grid", "10f", "mmp")
    best = min(fits, key=lambda r: max(r["ttft_wc"] / slo.ttft_limit_seconds, r["tpot_wc"] / slo.tpot_limit_seconds))
    binding = "TPOT" if not best["tpot_ok"] else "TTFT"
    raise InfeasibleError(
        f"no remote ratio in [0, 1] meets the SLOs; binding: {binding} (best worst-case TTFT "
        f"{best['ttft_wc']:.4g}s vs {slo.ttft_limit_seconds}s, TPOT {best['tpot_wc']:.4g}s vs "
        f"{slo.tpot_limit_seconds}s; last ratio tried {last['b']:.3g})",
        "10d" if binding == "TPOT" else "10b", "mmp")
