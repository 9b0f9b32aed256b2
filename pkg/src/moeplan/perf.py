"""Analytical latency and cost of a deployment plan.

A plan splits each layer's experts between the main model (local, on the
main container's CPU memory) and a remote serverless function that may be
replicated for prefill. Latency and cost follow the single-request model:
prefill runs every layer's experts once over the input batch, decode runs
them once per output token, and every container is billed for its memory
times its busy time.

Two workload modes share one code path. A :class:`~moeplan.workload.RoutingTrace`
gives exact per-expert token counts and per-token routing. An activation
matrix gives expected counts: ``n_in * top_k * s`` prefill tokens per
expert, and a single representative decode token routed to ``top_k * s``
of each expert, repeated ``n_out`` times.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import MB, Config, ExpertLatencyProfile, ModelSpec, PlatformSpec
from .workload import RoutingTrace, validate_activation

PLAN_VERSION = 1
HARD_CONSTRAINTS = ("10c", "10e", "10f", "10g", "10h", "10i")


class PlanError(ValueError):
    """Structurally invalid plan, or plan/model mismatch."""


@dataclass(frozen=True, eq=False)
class DeploymentPlan:
    remote_flags: tuple[np.ndarray, ...]
    remote_mem_spec: tuple[int, ...]
    replica_count: tuple[int, ...]
    main_mem_spec: int
    replica_partition: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        flags = tuple(np.array(f, dtype=bool) for f in self.remote_flags)
        for f in flags:
            f.setflags(write=False)
        object.__setattr__(self, "remote_flags", flags)
        object.__setattr__(self, "remote_mem_spec", tuple(int(v) for v in self.remote_mem_spec))
        object.__setattr__(self, "replica_count", tuple(int(z) for z in self.replica_count))
        object.__setattr__(self, "main_mem_spec", int(self.main_mem_spec))
        part = tuple(tuple(tuple(int(k) for k in s) for s in layer) for layer in self.replica_partition)
        object.__setattr__(self, "replica_partition", part)
        L = len(flags)
        if not (len(self.remote_mem_spec) == len(self.replica_count) == len(part) == L):
            raise PlanError("remote_flags, remote_mem_spec, replica_count and replica_partition must cover every layer")
        for l in range(L):
            remote = set(np.flatnonzero(flags[l]).tolist())
            if self.replica_count[l] < 1:
                raise PlanError(f"layer {l}: replica_count must be >= 1")
            if len(part[l]) != self.replica_count[l]:
                raise PlanError(f"layer {l}: replica partition has {len(part[l])} subsets, expected {self.replica_count[l]}")
            seen = [k for s in part[l] for k in s]
            if len(seen) != len(set(seen)) or set(seen) != remote:
                if remote and not seen:
                    raise PlanError(f"layer {l}: replica partition missing while experts are remote")
                raise PlanError(f"layer {l}: replica subsets must be disjoint and cover the remote experts")

    @property
    def num_layers(self) -> int:
        return len(self.remote_flags)

    def remote_count(self, layer: int) -> int:
        return int(self.remote_flags[layer].sum())

    @classmethod
    def all_local(cls, model: ModelSpec, main_mem_spec: int) -> "DeploymentPlan":
        L = model.num_layers
        return cls(tuple(np.zeros(K, dtype=bool) for K in model.experts_per_layer), (0,) * L, (1,) * L,
                   main_mem_spec, tuple(((),) for _ in range(L)))

    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "remote_flags": [f.astype(int).tolist() for f in self.remote_flags],
            "remote_mem_spec": list(self.remote_mem_spec),
            "replica_count": list(self.replica_count),
            "main_mem_spec": self.main_mem_spec,
            "replica_partition": [[list(s) for s in layer] for layer in self.replica_partition],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentPlan":
        if d.get("version") != PLAN_VERSION:
            raise PlanError(f"unsupported plan version {d.get('version')}")
        return cls(tuple(np.array(f, dtype=bool) for f in d["remote_flags"]), d["remote_mem_spec"],
                   d["replica_count"], d["main_mem_spec"], d["replica_partition"])


def save_plan(path, plan: DeploymentPlan) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True, indent=1))


def load_plan(path) -> DeploymentPlan:
    return DeploymentPlan.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LatencyBreakdown:
    pt_total: float
    pt_f: list[float]
    pt_e: list[float]
    gt_total: float
    gt_per_layer: list[float]
    ttft: float
    tpot: float
    cold_start: float
    replica_times: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConstraintResult:
    passed: bool
    slack: float


@dataclass
class CostReport:
    main_cost: float
    remote_prefill_cost: float
    remote_decode_cost: float
    total: float
    gpu_memory_bytes: int
    constraint_flags: dict[str, ConstraintResult]
    latency: LatencyBreakdown | None = None
    label: str = "plan"
    charged_memory_bytes: dict[str, float] = field(default_factory=dict)

    @property
    def hard_constraints_pass(self) -> bool:
        return all(self.constraint_flags[c].passed for c in HARD_CONSTRAINTS if c in self.constraint_flags)

    @property
    def feasible(self) -> bool:
        return all(r.passed for r in self.constraint_flags.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constraint_flags"] = {k: {"passed": v.passed, "slack": v.slack} for k, v in self.constraint_flags.items()}
        return d


# --------------------------------------------------------------------------
# workload normalisation

@dataclass(frozen=True, eq=False)
class _Load:
    """Per-expert prefill counts and decode routing weights.

    ``dec[l, i, k]`` is how much of token ``i`` layer ``l`` sends to expert ``k``
    (0/1 for a trace, ``top_k * s`` in expected mode); ``mult[i]`` is how
    many real tokens row ``i`` stands for.
    """
    npre: np.ndarray          # (L, Kmax)
    dec: np.ndarray           # (L, T, Kmax)
    mult: np.ndarray          # (T,)
    n_in: int
    n_out: int
    exact: bool


def _load(model: ModelSpec, workload, n_in: int | None, n_out: int | None) -> _Load:
    L, Kmax, k = model.num_layers, max(model.experts_per_layer), model.top_k
    if isinstance(workload, RoutingTrace):
        if workload.num_layers != L or workload.experts_per_layer != model.experts_per_layer:
            raise PlanError("trace dimensions do not match the model")
        if workload.top_k != k:
            raise PlanError("trace top_k does not match the model")
        for name, given, actual in (("n_in", n_in, workload.n_in), ("n_out", n_out, workload.n_out)):
            if given is not None and given != actual:
                raise PlanError(f"{name}={given} disagrees with the trace ({actual})")
        npre = workload.counts("prefill").astype(float)
        dec = workload.decode_indicator().astype(float)
        return _Load(npre, dec, np.ones(workload.n_out), workload.n_in, workload.n_out, True)
    act = validate_activation(workload, model.experts_per_layer)
    if act.shape != (L, Kmax):
        raise PlanError("activation dimensions do not match the model")
    if n_in is None or n_out is None:
        raise PlanError("expected-mode evaluation needs n_in and n_out")
    return _Load(n_in * k * act, (k * act)[:, None, :], np.array([float(n_out)]), int(n_in), int(n_out), False)


def _masks(plan: DeploymentPlan, model: ModelSpec) -> np.ndarray:
    Kmax = max(model.experts_per_layer)
    if plan.num_layers != model.num_layers:
        raise PlanError("plan layer count does not match the model")
    x = np.zeros((model.num_layers, Kmax), dtype=bool)
    for l, f in enumerate(plan.remote_flags):
        if len(f) != model.experts_per_layer[l]:
            raise PlanError(f"layer {l}: remote_flags length differs from experts_per_layer")
        x[l, :len(f)] = f
    return x


def _exists(model: ModelSpec) -> np.ndarray:
    Kmax = max(model.experts_per_layer)
    return np.arange(Kmax)[None, :] < np.array(model.experts_per_layer)[:, None]


def _check_specs(plan: DeploymentPlan, platform: PlatformSpec) -> None:
    if not 0 <= plan.main_mem_spec < len(platform.memory_grid_main):
        raise PlanError("main_mem_spec outside memory_grid_main")
    if any(not 0 <= v < platform.num_remote_specs for v in plan.remote_mem_spec):
        raise PlanError("remote_mem_spec outside memory_grid_remote")


def _batch(profile: ExpertLatencyProfile, l: int, v: int, n: np.ndarray) -> np.ndarray:
    """Expert batch time; an expert that gets no tokens is never run."""
    return np.where(n > 0, profile.batch(l, v, n), 0.0)


def cold_start(plan: DeploymentPlan, model: ModelSpec, platform: PlatformSpec, n_in: int, n_out: int) -> float:
    """Main-container start overlapped with the remote functions' starts."""
    cold = platform.cold_start_curve
    t = cold(platform.memory_grid_main[plan.main_mem_spec] + model.gpu_memory_bytes(n_in, n_out))
    for l in range(plan.num_layers):
        if plan.remote_count(l):
            t = max(t, cold(platform.memory_grid_remote[plan.remote_mem_spec[l]]))
    return float(t)


# --------------------------------------------------------------------------
# latency

def _prefill(plan, model, platform, profile, ld: _Load, overheads=None):
    x = _masks(plan, model)
    D, Bw = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    tr = platform.invocation_overhead_mean_seconds if overheads is None else overheads
    swap = 2.0 * model.swap_latency_curve(ld.n_in)
    pt_f, pt_e, zts = [], [], []
    for l in range(model.num_layers):
        K = model.experts_per_layer[l]
        n = ld.npre[l, :K]
        pt_f.append(model.non_expert_prefill_curves[l](ld.n_in))
        local = float(_batch(profile, l, plan.main_mem_spec, n[~x[l, :K]]).sum())
        per_expert = _batch(profile, l, plan.remote_mem_spec[l], n) + 2.0 * n * D / Bw
        zt = [float(per_expert[list(s)].sum()) + tr[l] if s else 0.0 for s in plan.replica_partition[l]]
        zts.append(zt)
        pt_e.append(max(local, max(zt)) + swap)
    return pt_f, pt_e, zts


def _decode_arms(plan, model, platform, profile, ld: _Load, overheads=None):
    """Per-layer, per-token-row local and remote arm times plus the remote-expert invocation time."""
    x = _masks(plan, model)
    D, Bw = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    tr = np.asarray(platform.invocation_overhead_mean_seconds if overheads is None else overheads)
    tc = profile.single_token_table()
    t_loc = tc[:, plan.main_mem_spec]                                   # (L,)
    t_rem = tc[np.arange(model.num_layers), list(plan.remote_mem_spec)] + 2.0 * D / Bw + tr
    local = np.einsum("lik,lk->li", ld.dec, ~x) * t_loc[:, None]
    remote = np.einsum("lik,lk->li", ld.dec, x) * t_rem[:, None]
    return local, remote, t_rem


def _decode(plan, model, platform, profile, ld: _Load, overheads=None):
    local, remote, _ = _decode_arms(plan, model, platform, profile, ld, overheads)
    swap = 2.0 * model.swap_latency_curve(model.top_k)
    tf = np.array(model.non_expert_decode_seconds)
    per_row = tf[:, None] + swap + np.maximum(local, remote)           # (L, T)
    return per_row @ ld.mult


def prefill_latency(plan: DeploymentPlan, model: ModelSpec, platform: PlatformSpec,
                    profile: ExpertLatencyProfile, workload, n_in: int | None = None) -> LatencyBreakdown:
    """Prefill part of the latency breakdown (decode fields left at zero)."""
    _check_specs(plan, platform)
    ld = _load(model, workload, n_in, 0 if not isinstance(workload, RoutingTrace) else None)
    if ld.n_in < 1:
        raise PlanError("n_in must be >= 1")
    pt_f, pt_e, zts = _prefill(plan, model, platform, profile, ld)
    pt = float(sum(pt_f) + sum(pt_e))
    cold = cold_start(plan, model, platform, ld.n_in, ld.n_out)
    return LatencyBreakdown(pt, pt_f, pt_e, 0.0, [0.0] * model.num_layers, pt + cold, 0.0, cold, zts)


def decode_latency(plan: DeploymentPlan, model: ModelSpec, platform: PlatformSpec,
                   profile: ExpertLatencyProfile, workload, n_out: int | None = None) -> LatencyBreakdown:
    """Decode part of the latency breakdown (prefill fields left at zero)."""
    _check_specs(plan, platform)
    ld = _load(model, workload, 0 if not isinstance(workload, RoutingTrace) else None, n_out)
    if ld.n_out < 1:
        raise PlanError("n_out must be >= 1")
    gt_l = _decode(plan, model, platform, profile, ld)
    gt = float(gt_l.sum())
    L = model.num_layers
    return LatencyBreakdown(0.0, [0.0] * L, [0.0] * L, gt, gt_l.tolist(), 0.0, gt / ld.n_out, 0.0, [])


def latency(plan: DeploymentPlan, cfg: Config, workload, n_in: int | None = None, n_out: int | None = None,
            overheads: Sequence[float] | None = None) -> LatencyBreakdown:
    model, platform, _, profile = cfg
    _check_specs(plan, platform)
    ld = _load(model, workload, n_in, n_out)
    return _latency(plan, model, platform, profile, ld, overheads)


def _latency(plan, model, platform, profile, ld: _Load, overheads=None) -> LatencyBreakdown:
    pt_f, pt_e, zts = _prefill(plan, model, platform, profile, ld, overheads)
    gt_l = _decode(plan, model, platform, profile, ld, overheads) if ld.n_out else np.zeros(model.num_layers)
    pt = float(sum(pt_f) + sum(pt_e))
    gt = float(gt_l.sum())
    cold = cold_start(plan, model, platform, ld.n_in, ld.n_out)
    return LatencyBreakdown(pt, pt_f, pt_e, gt, gt_l.tolist(), pt + cold, gt / ld.n_out if ld.n_out else 0.0,
                            cold, zts)


# --------------------------------------------------------------------------
# cost

def main_model_cost(plan: DeploymentPlan, model: ModelSpec, platform: PlatformSpec, lat: LatencyBreakdown,
                    n_in: int, n_out: int) -> float:
    """Main container: busy time times (GPU memory at the GPU price + CPU memory at the CPU price)."""
    mg = model.gpu_memory_bytes(n_in, n_out)
    rate = platform.gpu_price_per_mb_second * mg / MB + \
        platform.cpu_price_per_mb_second * platform.memory_grid_main[plan.main_mem_spec] / MB
    return (lat.pt_total + lat.gt_total) * rate


def _remote_cost(plan, model, platform, profile, ld: _Load, zts, overheads=None) -> tuple[float, float]:
    cc = platform.cpu_price_per_mb_second
    mem = np.array([platform.memory_grid_remote[v] for v in plan.remote_mem_spec], dtype=float) / MB
    pc = cc * float(sum(mem[l] * sum(zts[l]) for l in range(model.num_layers)))
    if not ld.n_out:
        return pc, 0.0
    _, remote, _ = _decode_arms(plan, model, platform, profile, ld, overheads)
    gc = cc * float(mem @ (remote @ ld.mult))
    return pc, gc


def remote_cost(plan: DeploymentPlan, cfg: Config, workload, n_in: int | None = None,
                n_out: int | None = None) -> tuple[float, float]:
    """(prefill, decode) cost of the remote functions."""
    model, platform, _, profile = cfg
    _check_specs(plan, platform)
    ld = _load(model, workload, n_in, n_out)
    _, _, zts = _prefill(plan, model, platform, profile, ld)
    return _remote_cost(plan, model, platform, profile, ld, zts)


def _constraints(plan, model, platform, slo, ld: _Load, lat: LatencyBreakdown) -> dict[str, ConstraintResult]:
    x = _masks(plan, model)
    D = model.token_embedding_bytes
    out: dict[str, ConstraintResult] = {}

    def put(name, slack, ok=None):
        out[name] = ConstraintResult(bool(slack >= 0) if ok is None else ok, float(slack))

    put("10b", slo.ttft_limit_seconds - lat.ttft)
    put("10d", slo.tpot_limit_seconds - lat.tpot)
    spec_ok = 0 <= plan.main_mem_spec < len(platform.memory_grid_main) and \
        all(0 <= v < platform.num_remote_specs for v in plan.remote_mem_spec)
    put("10c", 0.0, spec_ok)

    slack_e = np.inf
    for l in range(model.num_layers):
        K = model.experts_per_layer[l]
        xr = x[l, :K]
        if xr.any():
            need = float(model.expert_memory_bytes[l][xr].sum() + D * ld.npre[l, :K][xr].sum())
            slack_e = min(slack_e, platform.memory_grid_remote[plan.remote_mem_spec[l]] - need)
    put("10e", slack_e)

    local_bytes = sum(int(model.expert_memory_bytes[l][~x[l, :K]].sum())
                      for l, K in enumerate(model.experts_per_layer))
    put("10f", platform.memory_grid_main[plan.main_mem_spec] - (local_bytes + D * ld.n_out))

    slack_g = np.inf
    for l in range(model.num_layers):
        for s in plan.replica_partition[l]:
            if s:
                slack_g = min(slack_g, platform.payload_limit_bytes - D * float(ld.npre[l, list(s)].sum()))
    put("10g", slack_g)
    put("10h", 0.0, True)   # binary domains are enforced by DeploymentPlan itself
    put("10i", float(platform.max_replicas - max(plan.replica_count)),
        platform.max_replicas >= max(plan.replica_count) and min(plan.replica_count) >= 1)
    return out


def check_constraints(plan: DeploymentPlan, cfg: Config, workload, n_in: int | None = None,
                      n_out: int | None = None) -> dict[str, ConstraintResult]:
    """Pass/fail with slack for every constraint; slacks are seconds or bytes. Never raises on failure."""
    model, platform, slo, profile = cfg
    ld = _load(model, workload, n_in, n_out)
    lat = _latency(plan, model, platform, profile, ld)
    return _constraints(plan, model, platform, slo, ld, lat)


def evaluate(plan: DeploymentPlan, cfg: Config, workload, n_in: int | None = None, n_out: int | None = None,
             overheads: Sequence[float] | None = None) -> CostReport:
    """Latency, every cost term and the constraint flags of ``plan`` on ``workload``."""
    model, platform, slo, profile = cfg
    _check_specs(plan, platform)
    ld = _load(model, workload, n_in, n_out)
    lat = _latency(plan, model, platform, profile, ld, overheads)
    main = main_model_cost(plan, model, platform, lat, ld.n_in, ld.n_out)
    pc, gc = _remote_cost(plan, model, platform, profile, ld, lat.replica_times, overheads)
    mg = model.gpu_memory_bytes(ld.n_in, ld.n_out)
    charged = {"gpu": float(mg), "cpu_main": float(platform.memory_grid_main[plan.main_mem_spec]),
               "cpu_remote": float(sum(platform.memory_grid_remote[v]
                                       for l, v in enumerate(plan.remote_mem_spec) if plan.remote_count(l)))}
    return CostReport(main, pc, gc, main + pc + gc, mg, _constraints(plan, model, platform, slo, ld, lat), lat,
                      "plan", charged)


# --------------------------------------------------------------------------
# baselines

BASELINES = ("CPU", "GPU", "MIX", "FETCH")


def mix_main_spec(model: ModelSpec, platform: PlatformSpec, n_in: int, n_out: int) -> int:
    """Smallest main spec holding every expert plus the request's token data."""
    need = model.total_expert_bytes + model.token_embedding_bytes * (n_in + n_out)
    v = platform.main_spec_at_least(need)
    if v is None:
        raise PlanError("MIX: experts do not fit in the largest main memory spec")
    return v


def _whole_model_bytes(model: ModelSpec, n_in: int, n_out: int) -> int:
    return model.gpu_memory_bytes(n_in, n_out) + model.total_expert_bytes


def baseline_cost(kind: str, cfg: Config, workload, n_in: int | None = None, n_out: int | None = None) -> CostReport:
    """CPU, GPU, MIX or FETCH deployment of the whole model in one container."""
    model, platform, slo, profile = cfg
    kind = kind.upper()
    if kind not in BASELINES:
        raise PlanError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    ld = _load(model, workload, n_in, n_out)
    L = model.num_layers
    if kind == "MIX":
        plan = DeploymentPlan.all_local(model, mix_main_spec(model, platform, ld.n_in, ld.n_out))
        rep = evaluate(plan, cfg, workload, n_in, n_out)
        rep.label = "MIX"
        return rep

    ex = _exists(model)
    if kind == "CPU":
        if model.cpu_non_expert_prefill_curves is None:
            raise PlanError("CPU baseline needs cpu_non_expert_* timings in the model config")
        mem = _whole_model_bytes(model, ld.n_in, ld.n_out)
        v = platform.main_spec_at_least(mem)
        if v is None:
            raise PlanError("CPU: model does not fit in the largest main memory spec")
        pt_f = [c(ld.n_in) for c in model.cpu_non_expert_prefill_curves]
        pt_e = [float(_batch(profile, l, v, ld.npre[l][ex[l]]).sum()) for l in range(L)]
        t_tok = profile.single_token_table()[:, v]
        tf = np.array(model.cpu_non_expert_decode_seconds)
        gt_l = (tf[:, None] + ld.dec.sum(axis=2) * t_tok[:, None]) @ ld.mult
        held = platform.memory_grid_main[v]
        rate = platform.cpu_price_per_mb_second * held / MB
        charged = {"cpu_main": float(held)}
    else:
        if profile.gpu_seconds is None:
            raise PlanError(f"{kind} baseline needs a GPU expert profile")
        pt_f = [c(ld.n_in) for c in model.non_expert_prefill_curves]
        pt_e = [float(np.where(ld.npre[l][ex[l]] > 0, profile.gpu_batch(l, ld.npre[l][ex[l]]), 0.0).sum())
                for l in range(L)]
        g1 = np.array([profile.gpu_batch(l, 1.0) for l in range(L)])
        tf = np.array(model.non_expert_decode_seconds)
        gt_l = (tf[:, None] + ld.dec.sum(axis=2) * g1[:, None]) @ ld.mult
        if kind == "GPU":
            held = _whole_model_bytes(model, ld.n_in, ld.n_out)
            rate = platform.gpu_price_per_mb_second * held / MB
            charged = {"gpu": float(held)}
        else:
            # experts run from a GPU buffer holding those the request touches, while
            # the full expert set stays cached in the main container's CPU memory
            active = (ld.npre > 0) | (ld.dec.sum(axis=1) > 0)
            buffer = sum(int(model.expert_memory_bytes[l][active[l, :K]].sum())
                         for l, K in enumerate(model.experts_per_layer))
            cpu = platform.memory_grid_main[mix_main_spec(model, platform, ld.n_in, ld.n_out)]
            gpu = model.gpu_memory_bytes(ld.n_in, ld.n_out) + buffer
            rate = (platform.gpu_price_per_mb_second * gpu + platform.cpu_price_per_mb_second * cpu) / MB
            held = gpu + cpu
            charged = {"gpu": float(gpu), "cpu_main": float(cpu), "gpu_expert_buffer": float(buffer)}
    pt = float(sum(pt_f) + sum(pt_e))
    gt = float(np.sum(gt_l))
    cold = float(platform.cold_start_curve(held))
    lat = LatencyBreakdown(pt, list(map(float, pt_f)), pt_e, gt, np.asarray(gt_l).tolist(), pt + cold,
                           gt / ld.n_out if ld.n_out else 0.0, cold, [])
    flags = {"10b": ConstraintResult(slo.ttft_limit_seconds >= lat.ttft, slo.ttft_limit_seconds - lat.ttft),
             "10d": ConstraintResult(slo.tpot_limit_seconds >= lat.tpot, slo.tpot_limit_seconds - lat.tpot)}
    main = (pt + gt) * rate
    return CostReport(main, 0.0, 0.0, main, model.gpu_memory_bytes(ld.n_in, ld.n_out), flags, lat, kind, charged)


def write_report_json(path, report: CostReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))
