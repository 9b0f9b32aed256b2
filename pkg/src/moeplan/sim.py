"""Trace replay with sampled invocation overheads, plus exhaustive reference solvers."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import MB, Config
from .perf import (CostReport, DeploymentPlan, LatencyBreakdown, PlanError, _constraints, _load, baseline_cost,
                   cold_start, main_model_cost)
from .planner.dual import InfeasibleError
from .planner.worst import layer_view, wc_decode_layer, wc_prefill_layer
from .workload import RoutingTrace


class PayloadError(RuntimeError):
    """A replica dispatch carried more token data than the payload limit."""


class OracleCapError(ValueError):
    pass


@dataclass
class SimResult:
    realized_ttft: float
    realized_tpot: float
    realized_cost: CostReport
    per_layer_replica_loads: list[list[float]]
    overhead_samples: list[float]
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["realized_cost"] = self.realized_cost.to_dict()
        return d


class _Overhead:
    """Lognormal invocation overhead with a given mean; exact mean when dispersion is 0."""

    def __init__(self, means: Sequence[float], dispersion: float, rng: np.random.Generator):
        self.means = list(means)
        self.sigma = float(dispersion)
        self.rng = rng
        self.samples: list[float] = []

    def draw(self, layer: int, size: int = 1) -> np.ndarray:
        mu = self.means[layer]
        if self.sigma == 0 or mu == 0:
            out = np.full(size, mu)
        else:
            out = self.rng.lognormal(math.log(mu) - 0.5 * self.sigma ** 2, self.sigma, size)
        self.samples.extend(out.tolist())
        return out


def simulate(plan: DeploymentPlan, cfg: Config, trace: RoutingTrace, seed: int,
             dispersion: float | None = None) -> SimResult:
    """Replay ``trace`` through ``plan`` token by token and layer by layer."""
    model, platform, slo, profile = cfg
    if not isinstance(trace, RoutingTrace):
        raise PlanError("simulate needs a routing trace")
    ld = _load(model, trace, None, None)
    if plan.num_layers != model.num_layers or any(len(f) != K for f, K in zip(plan.remote_flags, model.experts_per_layer)):
        raise PlanError("plan dimensions do not match the model/trace")
    if ld.n_in < 1 or ld.n_out < 1:
        raise PlanError("trace needs at least one prefill and one decode token")
    sigma = platform.invocation_overhead_dispersion if dispersion is None else dispersion
    if sigma < 0:
        raise ValueError("dispersion must be non-negative")
    oh = _Overhead(platform.invocation_overhead_mean_seconds, sigma, np.random.default_rng(seed))
    D, Bw = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    U = platform.payload_limit_bytes
    w = plan.main_mem_spec
    cc = platform.cpu_price_per_mb_second
    rem_mem = [platform.memory_grid_remote[v] / MB for v in plan.remote_mem_spec]

    # prefill: one batch per layer, replicas in parallel
    swap_in = 2.0 * model.swap_latency_curve(ld.n_in)
    pt_f, pt_e, zts = [], [], []
    pc = 0.0
    for l in range(model.num_layers):
        K = model.experts_per_layer[l]
        n = ld.npre[l, :K]
        x = plan.remote_flags[l]
        local = sum(profile.batch(l, w, n[k]) for k in range(K) if not x[k] and n[k] > 0)
        zt = []
        for subset in plan.replica_partition[l]:
            if not subset:
                zt.append(0.0)
                continue
            sent = D * float(sum(n[k] for k in subset))
            if sent > U:
                raise PayloadError(f"layer {l}: replica dispatch of {sent:.0f} bytes exceeds payload limit {U}")
            work = sum((profile.batch(l, plan.remote_mem_spec[l], n[k]) if n[k] > 0 else 0.0) + 2.0 * n[k] * D / Bw
                       for k in subset)
            zt.append(work + float(oh.draw(l)[0]))
        pt_f.append(model.non_expert_prefill_curves[l](ld.n_in))
        pt_e.append(max(local, max(zt)) + swap_in)
        zts.append(zt)
        pc += cc * rem_mem[l] * sum(zt)

    # decode: every output token walks every layer
    swap_k = 2.0 * model.swap_latency_curve(model.top_k)
    tc = profile.single_token_table()
    gt_l = np.zeros(model.num_layers)
    gc = 0.0
    for i in range(ld.n_out):
        for l in range(model.num_layers):
            routed = trace.decode[l, i]
            x = plan.remote_flags[l]
            loc = [k for k in routed if not x[k]]
            rem = [k for k in routed if x[k]]
            t_local = len(loc) * tc[l, w]
            t_remote = 0.0
            if rem:
                per = tc[l, plan.remote_mem_spec[l]] + 2.0 * D / Bw + oh.draw(l, len(rem))
                t_remote = float(per.sum())
                gc += cc * rem_mem[l] * t_remote
            gt_l[l] += model.non_expert_decode_seconds[l] + swap_k + max(t_local, t_remote)

    pt = float(sum(pt_f) + sum(pt_e))
    gt = float(gt_l.sum())
    cold = cold_start(plan, model, platform, ld.n_in, ld.n_out)
    lat = LatencyBreakdown(pt, pt_f, pt_e, gt, gt_l.tolist(), pt + cold, gt / ld.n_out, cold, zts)
    main = main_model_cost(plan, model, platform, lat, ld.n_in, ld.n_out)
    rep = CostReport(main, pc, gc, main + pc + gc, model.gpu_memory_bytes(ld.n_in, ld.n_out),
                     _constraints(plan, model, platform, slo, ld, lat), lat, "simulated")
    return SimResult(lat.ttft, lat.tpot, rep, zts, oh.samples, seed)


# --------------------------------------------------------------------------
# exact partitioning

MAX_ORACLE_TASKS = 14
MAX_ORACLE_Z = 4


def oracle_partition(loads: Sequence[float], z: int) -> tuple[float, list[list[int]]]:
    """Optimal makespan by depth-first branch and bound.

    Tasks go in descending order; a task is never tried on two replicas with
    identical current load (interchangeable), and branches that cannot beat
    the incumbent are cut.
    """
    n = len(loads)
    if n > MAX_ORACLE_TASKS or z > MAX_ORACLE_Z:
        raise OracleCapError(f"oracle_partition handles <= {MAX_ORACLE_TASKS} tasks and z <= {MAX_ORACLE_Z}")
    if z < 1:
        raise ValueError("z must be >= 1")
    if n == 0:
        return 0.0, [[] for _ in range(z)]
    order = sorted(range(n), key=lambda i: (-loads[i], i))
    vals = [loads[i] for i in order]
    lower = max(max(vals), sum(vals) / z)
    best = [sum(vals), [list(order)] + [[] for _ in range(z - 1)]]
    bins = [0] * z if all(float(v).is_integer() for v in vals) else [0.0] * z
    assign = [[] for _ in range(z)]

    def dfs(i: int, cur_max):
        if cur_max >= best[0]:
            return
        if i == n:
            best[0] = cur_max
            best[1] = [[order[t] for t in a] for a in assign]
            return
        tried = set()
        for j in range(z):
            if bins[j] in tried:
                continue
            tried.add(bins[j])
            bins[j] += vals[i]
            assign[j].append(i)
            dfs(i + 1, max(cur_max, bins[j]))
            assign[j].pop()
            bins[j] -= vals[i]
            if best[0] <= lower:
                return

    dfs(0, 0)
    return best[0], best[1]


@dataclass
class OracleReport:
    oracle_name: str
    instance_descriptor: str
    oracle_value: float
    candidate_value: float
    ratio_or_gap: float
    tolerance: float
    passed: bool

    def __post_init__(self):
        self.passed = bool(self.passed)


def write_oracle_reports(path, reports: Sequence[OracleReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("oracle_name", "instance", "oracle_value", "candidate_value", "ratio_or_gap", "tolerance", "pass"))
        for r in reports:
            wr.writerow((r.oracle_name, r.instance_descriptor, repr(r.oracle_value), repr(r.candidate_value),
                         repr(r.ratio_or_gap), repr(r.tolerance), int(r.passed)))


# --------------------------------------------------------------------------
# exhaustive planning

@dataclass
class GridCaps:
    layers: int = 3
    experts: int = 6
    specs: int = 8
    replicas: int = 3


@dataclass
class GridPlanResult:
    plan: DeploymentPlan | None
    cost: float
    evaluated: int
    feasible: bool
    reason: str = ""


def _layer_options(cfg: Config, l: int, w: int, activation: np.ndarray, n_in: int, n_out: int, zmax: int):
    """Every (remote set, remote spec, replicas) choice of one layer with its separable cost terms.

    Prefill expert counts and decode routing are expected values; cost and
    latency are evaluated directly from the single-request formulas rather
    than through the perf module, which the result is later checked against.
    """
    model, platform, _, profile = cfg
    K, k = model.experts_per_layer[l], model.top_k
    D, Bw = model.token_embedding_bytes, platform.network_bandwidth_bytes_per_second
    t_oh = platform.invocation_overhead_mean_seconds[l]
    s = activation[l, :K]
    npre = n_in * k * s
    rate = (platform.gpu_price_per_mb_second * model.gpu_memory_bytes(n_in, n_out)
            + platform.cpu_price_per_mb_second * platform.memory_grid_main[w]) / MB
    cc = platform.cpu_price_per_mb_second
    t_loc = profile.single_token(l, w)
    base_pre = model.non_expert_prefill_curves[l](n_in) + 2 * model.swap_latency_curve(n_in)
    base_dec = model.non_expert_decode_seconds[l] + 2 * model.swap_latency_curve(k)
    opts = []
    for mask in range(1 << K):
        remote = [e for e in range(K) if mask >> e & 1]
        local = [e for e in range(K) if not mask >> e & 1]
        local_pre = sum(profile.batch(l, w, npre[e]) for e in local if npre[e] > 0)
        local_dec = sum(k * s[e] * t_loc for e in local)
        local_bytes = int(sum(model.expert_memory_bytes[l][e] for e in local))
        specs = range(platform.num_remote_specs) if remote else [0]
        for v in specs:
            mem = platform.memory_grid_remote[v]
            need = sum(model.expert_memory_bytes[l][e] + D * npre[e] for e in remote)
            if remote and need > mem:
                continue
            loads = [(profile.batch(l, v, npre[e]) if npre[e] > 0 else 0.0) + 2 * npre[e] * D / Bw for e in remote]
            per_tok = profile.single_token(l, v) + 2 * D / Bw + t_oh
            rem_dec = sum(k * s[e] * per_tok for e in remote)
            gt = n_out * (base_dec + max(local_dec, rem_dec))
            zs = range(1, min(zmax, len(remote)) + 1) if remote else [1]
            for z in zs:
                if remote:
                    _, part = oracle_partition(loads, z)
                    zt = [sum(loads[i] for i in p) + t_oh if p else 0.0 for p in part]
                    if any(D * sum(npre[remote[i]] for i in p) > platform.payload_limit_bytes for p in part):
                        continue
                    subsets = tuple(tuple(sorted(remote[i] for i in p)) for p in part)
                else:
                    zt, subsets = [0.0], ((),)
                pt = base_pre + max(local_pre, max(zt))
                cost = rate * (pt + gt) + cc * mem / MB * (sum(zt) + n_out * rem_dec)
                opts.append({"mask": mask, "spec": v, "z": z, "parts": subsets, "cost": cost, "pt": pt, "gt": gt,
                             "local_bytes": local_bytes, "remote": bool(remote)})
    return opts


def _pareto(opts: list[dict], keys: Sequence[str]) -> list[dict]:
    """Drop options that another option matches or beats on every key."""
    opts = sorted(opts, key=lambda o: tuple(o[k] for k in keys))
    kept: list[dict] = []
    for o in opts:
        if not any(all(p[k] <= o[k] for k in keys) for p in kept):
            kept.append(o)
    return kept


def oracle_grid_plan(cfg: Config, activation, n_in: int, n_out: int, caps: GridCaps = GridCaps(),
                     worst_case: bool = True) -> GridPlanResult:
    """Cheapest plan over all remote sets x memory specs x replica counts.

    Feasibility uses the same worst-case TTFT/TPOT estimates the planner
    guarantees (or the expected-mode values with ``worst_case=False``) plus
    every hard constraint. Cost, prefill time, decode time and local memory
    all add up over layers and cold start is a max, so per layer only the
    Pareto-optimal options can be part of an optimum; the search over their
    product is a depth-first branch and bound, exact in the result.
    """
    model, platform, slo, _ = cfg
    act = np.asarray(activation, float)
    L = model.num_layers
    if L > caps.layers or max(model.experts_per_layer) > caps.experts or len(platform.memory_grid_main) > caps.specs:
        raise OracleCapError(f"instance exceeds oracle caps {caps}")
    zmax = min(caps.replicas, platform.max_replicas)
    cold = platform.cold_start_curve
    keys = ("cost", "pre", "dec", "local_bytes", "cold")
    best: list = [math.inf, None]
    evaluated = 0
    for w in range(len(platform.memory_grid_main)):
        main_cold = float(cold(platform.memory_grid_main[w] + model.gpu_memory_bytes(n_in, n_out)))
        room = platform.memory_grid_main[w] - model.token_embedding_bytes * n_out
        per_layer = []
        for l in range(L):
            opts = _layer_options(cfg, l, w, act, n_in, n_out, zmax)
            evaluated += len(opts)
            K = model.experts_per_layer[l]
            for o in opts:
                o["cold"] = float(cold(platform.memory_grid_remote[o["spec"]])) if o["remote"] else 0.0
                if worst_case:
                    x = np.array([(o["mask"] >> e) & 1 for e in range(K)], bool)
                    view = layer_view(cfg, act, l, x, n_in)
                    o["pre"] = wc_prefill_layer(cfg, l, w, o["spec"], o["z"], view, n_in)
                    o["dec"] = wc_decode_layer(cfg, l, w, o["spec"], view, n_out)
                else:
                    o["pre"], o["dec"] = o["pt"], o["gt"] / n_out
            per_layer.append(_pareto([o for o in opts if o["local_bytes"] <= room], keys))
        if any(not opts for opts in per_layer):
            continue
        # suffix minima for bounding
        suf = {k: [0.0] * (L + 1) for k in ("cost", "pre", "dec", "local_bytes")}
        for l in reversed(range(L)):
            for k in suf:
                suf[k][l] = suf[k][l + 1] + min(o[k] for o in per_layer[l])
        chosen: list[dict] = []

        def dfs(l, cost, pre, dec, nbytes, cold_t):
            if cost + suf["cost"][l] >= best[0]:
                return
            if nbytes + suf["local_bytes"][l] > room:
                return
            if pre + suf["pre"][l] + cold_t > slo.ttft_limit_seconds or dec + suf["dec"][l] > slo.tpot_limit_seconds:
                return
            if l == L:
                best[0] = cost
                best[1] = (w, list(chosen))
                return
            for o in per_layer[l]:
                chosen.append(o)
                dfs(l + 1, cost + o["cost"], pre + o["pre"], dec + o["dec"], nbytes + o["local_bytes"],
                    max(cold_t, o["cold"]))
                chosen.pop()

        dfs(0, 0.0, 0.0, 0.0, 0, main_cold)
    if best[1] is None:
        return GridPlanResult(None, math.inf, evaluated, False, "no enumerated plan meets the SLOs")
    w, combo = best[1]
    flags = tuple(np.array([(o["mask"] >> e) & 1 for e in range(model.experts_per_layer[l])], bool)
                  for l, o in enumerate(combo))
    plan = DeploymentPlan(flags, [o["spec"] for o in combo], [o["z"] for o in combo], w,
                          [o["parts"] for o in combo])
    return GridPlanResult(plan, best[0], evaluated, True)


# --------------------------------------------------------------------------
# baseline comparison

COMPARE_HEADER = ("request_id", "method", "total_cost", "ttft", "tpot", "ttft_ok", "tpot_ok", "reduction_pct")
METHODS = ("PLAN", "CPU", "GPU", "MIX", "FETCH")


def _one_request(args):
    from .planner.pipeline import plan as make_plan
    cfg, pred, trace, seed, eta, epsilon = args
    rows = {}
    try:
        res = make_plan(cfg, pred, trace.n_in, trace.n_out, eta=eta, epsilon=epsilon)
        sim = simulate(res.plan, cfg, trace, seed)
        rows["PLAN"] = (sim.realized_cost.total, sim.realized_ttft, sim.realized_tpot)
    except InfeasibleError:
        rows["PLAN"] = (math.nan, math.nan, math.nan)
    for kind in METHODS[1:]:
        r = baseline_cost(kind, cfg, trace)
        rows[kind] = (r.total, r.latency.ttft, r.latency.tpot)
    return rows


def compare_baselines(cfg: Config, requests: Sequence[tuple[np.ndarray, RoutingTrace]], seed: int,
                      methods: Sequence[str] = METHODS, eta: float = 0.1, epsilon: float | None = None,
                      jobs: int = 1) -> list[dict]:
    """Plan + simulate each request and price every baseline on its trace.

    ``requests`` pairs the activation the planner sees (a prediction) with
    the trace that actually happens. Returns per-request rows followed by
    aggregate (``ALL``) rows; ``reduction_pct`` is the plan's saving against
    each method.
    """
    if not requests:
        raise ValueError("need at least one request")
    unknown = set(methods) - set(METHODS)
    if unknown or "PLAN" not in methods:
        raise ValueError(f"methods must include PLAN and come from {METHODS}")
    args = [(cfg, pred, tr, seed + j, eta, epsilon) for j, (pred, tr) in enumerate(requests)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_one_request, args))
    else:
        results = [_one_request(a) for a in args]
    slo = cfg.slo
    rows = []
    totals = {m: 0.0 for m in methods}
    for (pred, tr), res in zip(requests, results):
        plan_cost = res["PLAN"][0]
        for m in methods:
            cost, ttft, tpot = res[m]
            totals[m] += cost
            rows.append({"request_id": tr.prompt_id, "method": m, "total_cost": cost, "ttft": ttft, "tpot": tpot,
                         "ttft_ok": ttft <= slo.ttft_limit_seconds, "tpot_ok": tpot <= slo.tpot_limit_seconds,
                         "reduction_pct": 100.0 * (cost - plan_cost) / cost if cost else 0.0})
    for m in methods:
        ttfts = [r["ttft"] for r in rows if r["method"] == m]
        tpots = [r["tpot"] for r in rows if r["method"] == m]
        rows.append({"request_id": "ALL", "method": m, "total_cost": totals[m], "ttft": float(np.mean(ttfts)),
                     "tpot": float(np.mean(tpots)), "ttft_ok": all(r["ttft_ok"] for r in rows if r["method"] == m),
                     "tpot_ok": all(r["tpot_ok"] for r in rows if r["method"] == m and r["request_id"] != "ALL"),
                     "reduction_pct": 100.0 * (totals[m] - totals["PLAN"]) / totals[m] if totals[m] else 0.0})
    return rows


def best_baseline_reduction(rows: Sequence[dict]) -> tuple[str, float]:
    agg = {r["method"]: r for r in rows if r["request_id"] == "ALL"}
    best = min((m for m in agg if m != "PLAN"), key=lambda m: agg[m]["total_cost"])
    return best, agg[best]["reduction_pct"]


def write_compare_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, COMPARE_HEADER)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, float) else int(v) if isinstance(v, bool) else v)
                         for k, v in r.items()})


def write_sim_json(path, result: SimResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1))


# --------------------------------------------------------------------------
# synthetic request streams

PROMPT_TOKENS = (110, 140)   # about 500 characters of English text


@dataclass
class Request:
    prompt_id: str
    predicted: np.ndarray
    trace: RoutingTrace


def synthetic_requests(cfg: Config, count: int, seed: int, n_out: int = 200, history_size: int = 400,
                       alpha: int = 15, beta: int = 64, skew: float = 1.0,
                       tokens: tuple[int, int] = PROMPT_TOKENS) -> list[Request]:
    """Held-out requests from a clustered corpus, each with an SPS-predicted activation.

    The first ``history_size`` prompts (round-robin over four clusters) form
    the history; the next ``count`` are the requests whose traces get replayed.
    """
    from .prediction import HistoricalRecord, build_tree, predict_with_tree
    from .workload import CorpusParams, generate_clustered_corpus, trace_to_activation

    if count < 1:
        raise ValueError("count must be >= 1")
    model = cfg.model
    clusters = 4
    per = -(-(history_size + count) // clusters)
    params = CorpusParams(model.num_layers, model.experts_per_layer, model.top_k,
                          min_tokens=tokens[0], max_tokens=tokens[1], n_out=n_out)
    corpus = generate_clustered_corpus(clusters, per, skew, seed, params)
    # interleave clusters so any prefix is balanced
    corpus = [corpus[c * per + j] for j in range(per) for c in range(clusters)]
    history = [HistoricalRecord(p, trace_to_activation(t, "both")) for p, t in corpus[:history_size]]
    tree = build_tree(history, alpha, beta, seed=seed)
    out = []
    for p, t in corpus[history_size:history_size + count]:
        pred, _ = predict_with_tree(tree, p, alpha)
        out.append(Request(p.id, pred, t))
    return out


# --------------------------------------------------------------------------
# oracle suites

def lpt_bound(z: int) -> float:
    return 4.0 / 3.0 - 1.0 / (3.0 * z)


def lpt_oracle_suite(instances: int, max_tasks: int, seed: int, max_z: int = MAX_ORACLE_Z) -> list[OracleReport]:
    """LPT makespan against the exact optimum on random integer instances plus the tight 3,3,2,2,2 case."""
    from .planner.replicas import lpt_partition
    if max_tasks < 1 or max_tasks > MAX_ORACLE_TASKS:
        raise OracleCapError(f"max_tasks must lie in [1, {MAX_ORACLE_TASKS}]")
    rng = np.random.default_rng(seed)
    cases = [([3, 3, 2, 2, 2], 2)]
    for _ in range(instances):
        n = int(rng.integers(1, max_tasks + 1))
        cases.append((rng.integers(1, 101, size=n).tolist(), int(rng.integers(1, max_z + 1))))
    out = []
    for loads, z in cases:
        opt, _ = oracle_partition(loads, z)
        _, got = lpt_partition(list(enumerate(map(float, loads))), z)
        ratio = got / opt
        tol = lpt_bound(z)
        out.append(OracleReport("lpt", f"z={z};loads={'/'.join(map(str, loads))}", float(opt), float(got), ratio,
                                tol, ratio <= tol + 1e-12))
    return out


TOKEN_SETTINGS = tuple((n, K, m) for n in (64, 256, 1024) for K in (8, 64) for m in sorted({1, K // 4}))
TOKEN_TOLERANCE = 0.06


def token_bound_violation_rate(n: int, K: int, m: int, trials: int, rng: np.random.Generator) -> float:
    """Share of uniform-routing draws in which a fixed group of ``m`` experts exceeds the closed-form bound."""
    from .planner.bounds import worst_case_tokens
    counts = rng.multinomial(n, np.full(K, 1.0 / K), size=trials)[:, :m].sum(axis=1)
    return float(np.mean(counts > worst_case_tokens(n, m, K)))


def token_oracle_suite(trials: int, seed: int, settings=TOKEN_SETTINGS) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    out = []
    for n, K, m in settings:
        rate = token_bound_violation_rate(n, K, m, trials, rng)
        out.append(OracleReport("tokens", f"n={n};K={K};m={m};trials={trials}", 1.0 - 0.95, rate,
                                rate, TOKEN_TOLERANCE, rate <= TOKEN_TOLERANCE))
    return out


GRID_TOLERANCE = 0.05


def grid_oracle_suite(cfg: Config, instances: int, seed: int, n_in: int = 32, n_out: int = 16,
                      concentration: float = 0.7) -> list[OracleReport]:
    """Planner cost against the exhaustive grid optimum on random activations."""
    from .perf import evaluate
    from .planner.pipeline import plan as make_plan
    rng = np.random.default_rng(seed)
    out = []
    for j in range(instances):
        K = cfg.model.experts_per_layer
        act = np.zeros((cfg.model.num_layers, max(K)))
        for l, k in enumerate(K):
            act[l, :k] = rng.dirichlet(np.full(k, concentration))
        grid = oracle_grid_plan(cfg, act, n_in, n_out)
        try:
            res = make_plan(cfg, act, n_in, n_out)
            cand = evaluate(res.plan, cfg, act, n_in, n_out).total
        except InfeasibleError:
            cand = math.inf
        desc = f"instance={j};n_in={n_in};n_out={n_out}"
        if not grid.feasible:
            out.append(OracleReport("grid", desc, math.inf, cand, 1.0 if math.isinf(cand) else 0.0, 0.0,
                                    math.isinf(cand)))
            continue
        ratio = cand / grid.cost
        out.append(OracleReport("grid", desc, grid.cost, cand, ratio, 1.0 + GRID_TOLERANCE,
                                ratio <= 1.0 + GRID_TOLERANCE))
    return out
