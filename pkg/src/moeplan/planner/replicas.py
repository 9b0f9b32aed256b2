"""Replica partitioning of a layer's remote experts for prefill.

Each replica of a layer's remote function runs a subset of the remote
experts over the prefill batch; the layer waits for the slowest replica.
Assigning experts to replicas is multiway number partitioning, handled with
the longest-processing-time greedy rule.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..config import Config
from .bounds import hoeffding_margin


def lpt_partition(tasks: Sequence[tuple[int, float]], z: int) -> tuple[list[list[int]], float]:
    """Greedy LPT: heaviest task first, onto the least-loaded replica.

    Ties go to the lower expert id when sorting and to the lower replica
    index when choosing. Returns ``z`` subsets (some possibly empty) and the
    makespan.
    """
    if z < 1:
        raise ValueError("z must be >= 1")
    order = sorted(tasks, key=lambda kv: (-kv[1], kv[0]))
    if any(load < 0 for _, load in order):
        raise ValueError("loads must be non-negative")
    heap = [(0.0, j) for j in range(z)]
    parts: list[list[int]] = [[] for _ in range(z)]
    loads = [0.0] * z
    for eid, load in order:
        cur, j = heapq.heappop(heap)
        parts[j].append(eid)
        loads[j] = cur + load
        heapq.heappush(heap, (loads[j], j))
    return parts, max(loads) if order else 0.0


def layer_loads(cfg: Config, layer: int, remote_spec: int, npre: np.ndarray, experts: Sequence[int]) -> list[tuple[int, float]]:
    """Per-expert replica work: remote batch time plus the round trip of its tokens."""
    model, platform, _, profile = cfg
    D, B = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    out = []
    for k in experts:
        n = float(npre[k])
        t = profile.batch(layer, remote_spec, n) if n > 0 else 0.0
        out.append((int(k), t + 2.0 * n * D / B))
    return out


def worst_case_replica_time(cfg: Config, layer: int, remote_spec: int, z: int, npre_remote: Sequence[float],
                            n_in: int) -> float:
    """High-probability bound on the slowest replica of ``layer`` with ``z`` replicas.

    ``(z-1)/z * [tau(N_up) + 2*D*N_up/B] + T/z + t_rem`` where ``N_up`` bounds
    one expert's tokens and ``T`` is the layer's whole remote prefill work.
    Token counts here are routed assignments, ``n_in * top_k`` in total.
    """
    model, platform, _, profile = cfg
    D, B = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    K = model.experts_per_layer[layer]
    n = n_in * model.top_k
    n_up = min(float(n_in), hoeffding_margin(n) + n / K)
    head = profile.batch(layer, remote_spec, n_up) + 2.0 * D * n_up / B
    total = sum(load for _, load in layer_loads(cfg, layer, remote_spec, np.asarray(npre_remote, float),
                                                range(len(npre_remote))))
    return (z - 1) / z * head + total / z + platform.invocation_overhead_mean_seconds[layer]


@dataclass
class ReplicaDecision:
    replica_count: tuple[int, ...]
    partition: tuple[tuple[tuple[int, ...], ...], ...]
    potentials: list[tuple[int, int, float]] = field(default_factory=list)   # (step, layer, potential)


def payload_ok(parts, npre, D: int, limit: float, safety: float) -> bool:
    return all(safety * D * float(sum(npre[k] for k in s)) <= limit for s in parts)


def partition_for(cfg: Config, layer: int, remote_spec: int, npre: np.ndarray, experts: Sequence[int], z: int,
                  safety: float) -> list[list[int]] | None:
    """LPT on replica work; LPT on payload bytes if the first violates the payload limit."""
    model, platform, _, _ = cfg
    D, U = model.token_embedding_bytes, platform.payload_limit_bytes
    parts, _ = lpt_partition(layer_loads(cfg, layer, remote_spec, npre, experts), z)
    if payload_ok(parts, npre, D, U, safety):
        return parts
    parts, _ = lpt_partition([(int(k), float(npre[k])) for k in experts], z)
    return parts if payload_ok(parts, npre, D, U, safety) else None


def replica_cap(cfg: Config, n_remote: int) -> int:
    return max(1, min(cfg.platform.max_replicas, n_remote))
