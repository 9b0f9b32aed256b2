"""Request planning: ratio pre-allocation, expert selection, remote memory, replicas."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..config import GB, MB, Config
from ..perf import CostReport, DeploymentPlan, evaluate
from ..workload import validate_activation
from .bounds import worst_case_count
from .dual import DualSolution, InfeasibleError, TpotCoupling, optimize_remote_memory
from .fitting import FitError, FittedCurve, fit_curve
from .mmp import MMPResult, mmp_preallocate
from .replicas import ReplicaDecision, layer_loads, partition_for, replica_cap
from .worst import decode_fraction_bounds, remote_token_time, views_from_activation, wc_ttft, wc_tpot

DEFAULT_SAFETY = 1.25


def select_remote(activation, b: float, n_in: int, n_out: int, top_k: int,
                  experts_per_layer=None) -> tuple[np.ndarray, ...]:
    """Flag the ``floor(b*K)`` lowest-utility experts of every layer as remote.

    Utility is the expected token count over prefill and decode; ties go to
    the lower expert index.
    """
    if not 0 <= b <= 1:
        raise ValueError("b must lie in [0, 1]")
    act = np.asarray(activation, float)
    L, Kmax = act.shape
    Ks = experts_per_layer or [Kmax] * L
    flags = []
    for l, K in enumerate(Ks):
        s = act[l, :K]
        u = n_in * s + n_out * top_k * s
        m = math.floor(b * K + 1e-9)
        order = np.lexsort((np.arange(K), u))
        f = np.zeros(K, dtype=bool)
        f[order[:m]] = True
        flags.append(f)
    return tuple(flags)


def main_rate(cfg: Config, w: int, n_in: int, n_out: int) -> float:
    """Main model cost per second: GPU memory at the GPU price plus container memory at the CPU price."""
    model, platform = cfg.model, cfg.platform
    return (platform.gpu_price_per_mb_second * model.gpu_memory_bytes(n_in, n_out)
            + platform.cpu_price_per_mb_second * platform.memory_grid_main[w]) / MB


def decide_replicas(cfg: Config, flags, ys, w: int, activation, n_in: int, n_out: int,
                    safety: float = DEFAULT_SAFETY) -> ReplicaDecision:
    """Payload-minimal replica counts, grown greedily by replica potential.

    The potential of a layer is the total-cost drop from giving it one more
    replica. Growth first continues until the worst-case TTFT holds, then
    while some layer still has positive potential.
    """
    model, platform, slo, _ = cfg
    L = model.num_layers
    npre = n_in * model.top_k * activation
    experts = [np.flatnonzero(f).tolist() for f in flags]
    caps = [replica_cap(cfg, len(e)) for e in experts]
    zs, parts = [], []
    for l in range(L):
        if not experts[l]:
            zs.append(1)
            parts.append([[]])
            continue
        for z in range(1, caps[l] + 1):
            p = partition_for(cfg, l, ys[l], npre[l], experts[l], z, safety)
            if p is not None:
                zs.append(z)
                parts.append(p)
                break
        else:
            raise InfeasibleError(f"layer {l}: payload limit cannot be met with {caps[l]} replicas",
                                  "10g", "replicas")

    rate = main_rate(cfg, w, n_in, n_out)
    cc = platform.cpu_price_per_mb_second
    swap = 2.0 * model.swap_latency_curve(n_in)
    tr = platform.invocation_overhead_mean_seconds
    local_arm = [float(sum(cfg.profile.batch(l, w, npre[l, k]) for k in range(len(flags[l]))
                           if not flags[l][k] and npre[l, k] > 0)) for l in range(L)]

    def layer_cost(l, part_list) -> float:
        """Cost terms of layer ``l`` that depend on its replicas: main-model time and remote prefill bill."""
        loads = dict(layer_loads(cfg, l, ys[l], npre[l], experts[l]))
        zt = [sum(loads[k] for k in s) + tr[l] if s else 0.0 for s in part_list]
        pt_e = max(local_arm[l], max(zt)) + swap
        mem = platform.memory_grid_remote[ys[l]] / MB
        return rate * pt_e + cc * mem * sum(zt)

    views = views_from_activation(cfg, activation, flags, n_in)
    log: list[tuple[int, int, float]] = []
    step = 0

    def grow(require_positive: bool) -> bool:
        nonlocal step
        best = None
        for l in range(L):
            if zs[l] >= caps[l]:
                continue
            p = partition_for(cfg, l, ys[l], npre[l], experts[l], zs[l] + 1, safety)
            if p is None:
                continue
            pot = layer_cost(l, parts[l]) - layer_cost(l, p)
            log.append((step, l, pot))
            if best is None or pot > best[0]:
                best = (pot, l, p)
        if best is None or (require_positive and best[0] <= 0):
            return False
        zs[best[1]] += 1
        parts[best[1]] = best[2]
        step += 1
        return True

    while wc_ttft(cfg, views, w, ys, zs, n_in, n_out) > slo.ttft_limit_seconds:
        if not grow(require_positive=False):
            raise InfeasibleError("worst-case TTFT cannot be met at the replica limit", "10b", "replicas")
    while grow(require_positive=True):
        pass
    return ReplicaDecision(tuple(zs), tuple(tuple(tuple(s) for s in p) for p in parts), log)


@dataclass
class PlanResult:
    plan: DeploymentPlan
    report: CostReport
    mmp: MMPResult
    dual: DualSolution | None
    curves: dict[int, FittedCurve]
    replicas: ReplicaDecision
    ttft_wc: float
    tpot_wc: float
    stage_log: list[tuple[str, str, str, float]] = field(default_factory=list)


def memory_floor_gb(cfg: Config, flags, activation, n_in: int) -> np.ndarray:
    """Per-layer remote memory needed for weights plus worst-case prefill token data."""
    model = cfg.model
    n = n_in * model.top_k
    out = np.zeros(model.num_layers)
    for l, f in enumerate(flags):
        if f.any():
            mass = float(n * activation[l, :len(f)][f].sum())
            out[l] = (model.expert_memory_bytes[l][f].sum() + model.token_embedding_bytes * worst_case_count(mass, n)) / GB
    return out


def plan(cfg: Config, activation, n_in: int, n_out: int, eta: float = 0.1, epsilon: float | None = None,
         safety: float = DEFAULT_SAFETY, n_in_max: int | None = None) -> PlanResult:
    """Full planning pipeline for one request, evaluated in expected mode."""
    model, platform, slo, profile = cfg
    act = validate_activation(activation, model.experts_per_layer)
    if n_in < 1 or n_out < 1:
        raise ValueError("n_in and n_out must be >= 1")
    L, k = model.num_layers, model.top_k
    log: list[tuple[str, str, str, float]] = []

    mmp = mmp_preallocate(cfg, n_in_max or n_in, n_out, epsilon)
    for r in mmp.trajectory:
        log.append(("mmp", f"b={r['b']:.6g}", "ttft_wc", r["ttft_wc"]))
        log.append(("mmp", f"b={r['b']:.6g}", "tpot_wc", r["tpot_wc"]))
    w, b = mmp.main_mem_spec, mmp.remote_ratio
    log.append(("mmp", "result", "b", b))
    log.append(("mmp", "result", "main_mem_spec", w))

    flags = select_remote(act, b, n_in, n_out, k, model.experts_per_layer)
    remote_layers = [l for l in range(L) if flags[l].any()]
    for l in range(L):
        log.append(("select", f"layer={l}", "remote_count", float(flags[l].sum())))

    views = views_from_activation(cfg, act, flags, n_in)
    ys = [0] * L
    curves: dict[int, FittedCurve] = {}
    dual = None
    if remote_layers:
        D, B = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
        s_rem = np.array([act[l, :model.experts_per_layer[l]][flags[l]].sum() for l in range(L)])
        for l in remote_layers:
            try:
                curves[l] = fit_curve(profile, l, platform)
            except FitError as exc:
                raise FitError(f"memory stage: {exc}") from None
            c = curves[l]
            log.append(("fit", f"layer={l}", "theta1", c.theta1))
            log.append(("fit", f"layer={l}", "theta2", c.theta2))
            log.append(("fit", f"layer={l}", "theta3", c.theta3))
        floor_gb = memory_floor_gb(cfg, flags, act, n_in)
        # worst-case TPOT row: constant part plus sum of a_l * T_l(y_l)
        const, weights = 0.0, []
        for l in range(L):
            a_loc = profile.single_token(l, w)
            lo, hi = decode_fraction_bounds(views[l], n_out * k)
            const += model.non_expert_decode_seconds[l] + 2.0 * model.swap_latency_curve(k)
            if l in curves:
                extra = 2.0 * D / B + platform.invocation_overhead_mean_seconds[l]
                const += k * ((1 - hi) * a_loc + hi * extra)
                weights.append(k * hi)
            else:
                const += k * a_loc
        Hw = main_rate(cfg, w, n_in, n_out)
        sol, specs = optimize_remote_memory(
            [curves[l] for l in remote_layers],
            [k * s_rem[l] for l in remote_layers],
            [k * s_rem[l] * (2.0 * D / B + platform.invocation_overhead_mean_seconds[l]) for l in remote_layers],
            Hw, platform, TpotCoupling(tuple(weights), slo.tpot_limit_seconds - const), eta,
            [floor_gb[l] for l in remote_layers])
        dual = sol
        for (lam, val) in sol.trajectory:
            log.append(("dual", f"lambda={lam:.6g}", "tpot_row", val))
        for l, v in zip(remote_layers, specs):
            ys[l] = v
            log.append(("dual", f"layer={l}", "y_tilde_gb", float(sol.y_tilde[remote_layers.index(l)])))
            log.append(("dual", f"layer={l}", "remote_mem_spec", v))
        # the fit only approximates the profile: verify with the measured table, bump if needed
        top = platform.num_remote_specs - 1
        while wc_tpot(cfg, views, w, ys, n_out) > slo.tpot_limit_seconds:
            cand = [l for l in remote_layers if ys[l] < top]
            if not cand:
                raise InfeasibleError("worst-case TPOT not met after memory rounding", "10d", "memory")
            l = max(cand, key=lambda j: remote_token_time(cfg, j, ys[j]) - remote_token_time(cfg, j, ys[j] + 1))
            ys[l] += 1
            log.append(("dual", f"layer={l}", "bumped_spec", ys[l]))

    rep = decide_replicas(cfg, flags, ys, w, act, n_in, n_out, safety)
    for step, l, pot in rep.potentials:
        log.append(("replicas", f"step={step}", f"potential_layer={l}", pot))
    for l in range(L):
        log.append(("replicas", f"layer={l}", "z", rep.replica_count[l]))

    final = DeploymentPlan(flags, ys, rep.replica_count, w, rep.partition)
    report = evaluate(final, cfg, act, n_in, n_out)
    ttft = wc_ttft(cfg, views, w, ys, rep.replica_count, n_in, n_out)
    tpot = wc_tpot(cfg, views, w, ys, n_out)
    failed = [c for c in ("10c", "10e", "10f", "10g", "10h", "10i") if not report.constraint_flags[c].passed]
    if failed:
        raise InfeasibleError(f"emitted plan violates {', '.join(failed)}", failed[0], "final")
    if ttft > slo.ttft_limit_seconds:
        raise InfeasibleError("worst-case TTFT above limit", "10b", "final")
    if tpot > slo.tpot_limit_seconds:
        raise InfeasibleError("worst-case TPOT above limit", "10d", "final")
    log.append(("final", "plan", "total_cost", report.total))
    log.append(("final", "plan", "ttft_wc", ttft))
    log.append(("final", "plan", "tpot_wc", tpot))
    return PlanResult(final, report, mmp, dual, curves, rep, ttft, tpot, log)


def write_stage_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("stage", "item", "quantity", "value"))
        for stage, item, q, v in rows:
            wr.writerow((stage, item, q, repr(float(v))))
