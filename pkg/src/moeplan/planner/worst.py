"""Worst-case TTFT and TPOT estimates used while planning.

Everything is expressed per layer through a :class:`LayerView`: how many
experts sit on each side and how the routed token mass splits between
them. Planning-time views come either from a predicted activation matrix
and concrete remote flags, or (before selection) from a uniform routing
assumption and a remote ratio.

Decode uses a chord bound. Per token, the expert time of a layer is
``max((k - r) * a, r * b)`` where ``r`` of its ``k`` routed experts are
remote; that is convex in ``r``, so its average over tokens is at most
``k * ((1 - p) * a + p * b)`` with ``p`` the realized remote fraction.
``p`` itself is bounded with the Hoeffding margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..config import Config
from .bounds import worst_case_count, worst_case_fraction
from .replicas import worst_case_replica_time


@dataclass(frozen=True)
class LayerView:
    m_loc: int
    loc_mass: float                 # expected routed assignments to local experts (prefill)
    rem_counts: tuple[float, ...]   # expected prefill assignments per remote expert
    p_rem: float                    # fraction of routed assignments going remote

    @property
    def m_rem(self) -> int:
        return len(self.rem_counts)


def layer_view(cfg: Config, activation: np.ndarray, l: int, flags: np.ndarray, n_in: int) -> LayerView:
    K = cfg.model.experts_per_layer[l]
    s = activation[l, :K]
    x = np.asarray(flags, bool)
    npre = n_in * cfg.model.top_k * s
    return LayerView(int((~x).sum()), float(npre[~x].sum()), tuple(npre[x].tolist()), float(s[x].sum()))


def views_from_activation(cfg: Config, activation: np.ndarray, flags: Sequence[np.ndarray], n_in: int) -> list[LayerView]:
    return [layer_view(cfg, activation, l, flags[l], n_in) for l in range(cfg.model.num_layers)]


def views_uniform(cfg: Config, b: float, n_in: int) -> list[LayerView]:
    """Ratio-only view: ``ceil(bK)`` remote and ``K - floor(bK)`` local experts, both pessimistic."""
    model = cfg.model
    out = []
    for K in model.experts_per_layer:
        m_rem = math.ceil(b * K - 1e-9)
        m_loc = K - math.floor(b * K + 1e-9)
        per = n_in * model.top_k / K
        out.append(LayerView(m_loc, per * m_loc, (per,) * m_rem, m_rem / K))
    return out


def wc_local_prefill(cfg: Config, l: int, w: int, view: LayerView, n_in: int) -> float:
    if view.m_loc == 0 or view.loc_mass <= 0:
        return 0.0
    n = n_in * cfg.model.top_k
    U = min(worst_case_count(view.loc_mass, n), view.m_loc * n_in)
    # even spread maximizes the sum of concave batch times
    return view.m_loc * cfg.profile.batch(l, w, U / view.m_loc)


def wc_remote_prefill(cfg: Config, l: int, y: int, z: int, view: LayerView, n_in: int) -> float:
    if view.m_rem == 0:
        return 0.0
    n = n_in * cfg.model.top_k
    mass = sum(view.rem_counts)
    scale = worst_case_count(mass, n) / mass if mass > 0 else 0.0
    return worst_case_replica_time(cfg, l, y, z, [c * scale for c in view.rem_counts], n_in)


def wc_cold_start(cfg: Config, w: int, ys: Sequence[int], views: Sequence[LayerView], n_in: int, n_out: int) -> float:
    model, platform = cfg.model, cfg.platform
    t = platform.cold_start_curve(platform.memory_grid_main[w] + model.gpu_memory_bytes(n_in, n_out))
    for v, y in zip(views, ys):
        if v.m_rem:
            t = max(t, platform.cold_start_curve(platform.memory_grid_remote[y]))
    return float(t)


def wc_prefill_layer(cfg: Config, l: int, w: int, y: int, z: int, view: LayerView, n_in: int) -> float:
    model = cfg.model
    return (model.non_expert_prefill_curves[l](n_in) + 2.0 * model.swap_latency_curve(n_in)
            + max(wc_local_prefill(cfg, l, w, view, n_in), wc_remote_prefill(cfg, l, y, z, view, n_in)))


def wc_ttft(cfg: Config, views: Sequence[LayerView], w: int, ys: Sequence[int], zs: Sequence[int],
            n_in: int, n_out: int) -> float:
    pt = sum(wc_prefill_layer(cfg, l, w, ys[l], zs[l], v, n_in) for l, v in enumerate(views))
    return pt + wc_cold_start(cfg, w, ys, views, n_in, n_out)


def remote_token_time(cfg: Config, l: int, y: int) -> float:
    """One remote expert's per-token decode time: compute, round trip and invocation overhead."""
    model, platform = cfg.model, cfg.platform
    return (cfg.profile.single_token(l, y) + 2.0 * model.token_embedding_bytes / platform.network_bandwidth_bytes_per_second
            + platform.invocation_overhead_mean_seconds[l])


def decode_fraction_bounds(view: LayerView, n_dec: float) -> tuple[float, float]:
    """(low, high) confidence values of the remote fraction over ``n_dec`` routed assignments."""
    hi = worst_case_fraction(view.p_rem, n_dec)
    lo = 1.0 - worst_case_fraction(1.0 - view.p_rem, n_dec)
    if view.m_rem == 0:
        lo = hi = 0.0
    if view.m_loc == 0:
        lo = hi = 1.0
    return lo, hi


def wc_decode_layer(cfg: Config, l: int, w: int, y: int, view: LayerView, n_out: int) -> float:
    model = cfg.model
    k = model.top_k
    a = cfg.profile.single_token(l, w)
    b = remote_token_time(cfg, l, y)
    lo, hi = decode_fraction_bounds(view, n_out * k)
    arm = k * max((1 - p) * a + p * b for p in (lo, hi))
    return model.non_expert_decode_seconds[l] + 2.0 * model.swap_latency_curve(k) + arm


def wc_tpot(cfg: Config, views: Sequence[LayerView], w: int, ys: Sequence[int], n_out: int) -> float:
    return float(sum(wc_decode_layer(cfg, l, w, ys[l], v, n_out) for l, v in enumerate(views)))
