"""Command-line entry point: fit, predict, plan, simulate, compare, oracle.

Tables go to stdout, machine-readable CSV/JSON to files under ``--out``,
and every run writes ``run_manifest.json`` listing the files it produced.
All randomness derives from ``--seed``.

Exit codes: 0 success, 2 input or fit error, 3 infeasible, 4 internal error
(including an oracle check that fails).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import GB, MB, Config, ConfigError, load_config
from .perf import BASELINES, PlanError, baseline_cost, evaluate, load_plan, save_plan, write_report_json
from .planner.dual import InfeasibleError
from .planner.fitting import FitError, convexity_check, fit_curve, fit_exponential
from .prediction import PredictionError
from .presets import PRESETS, preset_config
from .workload import TraceError, read_traces_csv, validate_activation

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 2, 3, 4
INPUT_ERRORS = (ConfigError, TraceError, PredictionError, PlanError, FitError, ValueError, FileNotFoundError,
                KeyError)
PRICE_ENV = {"cpu": "MOEPLAN_CPU_PRICE", "gpu": "MOEPLAN_GPU_PRICE"}


class OracleFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers

class Run:
    """Output directory plus the manifest of everything written to it."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out or Path("runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        if name in self.outputs:
            raise RuntimeError(f"output {name} written twice")
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self, status: str, extra: dict | None = None) -> None:
        a = self.args
        doc = {
            "command": a.command,
            "argv": sys.argv[1:],
            "config_paths": [str(Path(a.config).resolve())] if a.config else [],
            "preset": None if a.config else a.preset,
            "seed": a.seed,
            "output_directory": str(self.out.resolve()),
            "artifact_version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "price_overrides": {k: os.environ[v] for k, v in PRICE_ENV.items() if v in os.environ},
            "status": status,
            "outputs": list(self.outputs),
        }
        doc.update(extra or {})
        (self.out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _env_price(name: str) -> float | None:
    raw = os.environ.get(PRICE_ENV[name])
    if raw is None:
        return None
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{PRICE_ENV[name]}: not a number ({raw!r})") from None
    if not v > 0:
        raise ConfigError(f"{PRICE_ENV[name]}: must be positive")
    return v


def load_cfg(args: argparse.Namespace) -> Config:
    cfg = load_config(args.config) if args.config else preset_config(args.preset, args.seed)
    cpu, gpu = _env_price("cpu"), _env_price("gpu")
    if cpu is not None or gpu is not None:
        cfg = cfg._replace(platform=cfg.platform.with_prices(cpu, gpu))
    return cfg


def table(header, rows) -> str:
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in cells)) if cells else len(str(h)) for i, h in enumerate(header)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def _load_activation(path: str, cfg: Config) -> np.ndarray:
    p = Path(path)
    arr = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter=",", ndmin=2)
    return validate_activation(arr, cfg.model.experts_per_layer)


def _request(args: argparse.Namespace, cfg: Config):
    """(activation, trace or None, n_in, n_out, request id) for plan/simulate."""
    from .sim import synthetic_requests
    if args.activation:
        if args.n_in is None:
            raise ValueError("--activation needs --n-in")
        return _load_activation(args.activation, cfg), None, args.n_in, args.n_out, Path(args.activation).stem
    if args.traces:
        tr = read_traces_csv(args.traces, cfg.model.experts_per_layer, cfg.model.top_k)
        if not tr:
            raise TraceError(f"{args.traces}: no traces")
        from .workload import trace_to_activation
        t = tr[0]
        return trace_to_activation(t, "both"), t, t.n_in, t.n_out, t.prompt_id
    req = synthetic_requests(cfg, 1, args.seed, n_out=args.n_out, history_size=args.history)[0]
    return req.predicted, req.trace, req.trace.n_in, req.trace.n_out, req.prompt_id


# --------------------------------------------------------------------------
# commands

def _fit_samples(path: str, L: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    rows: dict[int, list[tuple[float, float]]] = {l: [] for l in range(L)}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"layer", "memory_mb", "seconds"}
        if not need <= set(reader.fieldnames or ()):
            raise ValueError(f"{path}: expected columns layer,memory_mb,seconds")
        for r in reader:
            l = int(r["layer"])
            if l not in rows:
                raise ValueError(f"{path}: layer {l} outside the model's {L} layers")
            rows[l].append((float(r["memory_mb"]) * MB / GB, float(r["seconds"])))
    return {l: (np.array([y for y, _ in v]), np.array([t for _, t in v])) for l, v in rows.items()}


def _main_rate_for(cfg: Config, n_in: int, n_out: int) -> tuple[int, float]:
    from .perf import mix_main_spec
    from .planner.mmp import mmp_preallocate
    from .planner.pipeline import main_rate
    try:
        w = mmp_preallocate(cfg, n_in, n_out).main_mem_spec
    except InfeasibleError:
        w = mix_main_spec(cfg.model, cfg.platform, n_in, n_out)
    return w, main_rate(cfg, w, n_in, n_out)


def cmd_fit(args, run: Run) -> int:
    cfg = load_cfg(args)
    L = cfg.model.num_layers
    samples = _fit_samples(args.samples, L) if args.samples else None
    w, Hw = _main_rate_for(cfg, args.n_in or 128, args.n_out)
    cc = cfg.platform.cpu_price_per_mb_second * GB / MB
    curves, rows, failed = {}, [], []
    for l in range(L):
        try:
            c = fit_exponential(*samples[l]) if samples else fit_curve(cfg.profile, l, cfg.platform)
            thr, convex = convexity_check(c, Hw, cc)
            curves[str(l)] = c.to_dict()
            rows.append((l, c.theta1, c.theta2, c.theta3, c.residual_rms, thr, convex, ""))
        except FitError as exc:
            failed.append(l)
            rows.append((l, math.nan, math.nan, math.nan, math.nan, math.nan, False, str(exc)))
    header = ("layer", "theta1", "theta2", "theta3", "residual_rms", "threshold_gb", "convex_everywhere", "error")
    (run.path("fitted_curves.json")).write_text(json.dumps(
        {"main_mem_spec": w, "main_rate_per_second": Hw, "cpu_price_per_gb_second": cc, "curves": curves},
        indent=1, sort_keys=True))
    with open(run.path("fit_report.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, float) else int(v) if isinstance(v, bool) else v for v in r])
    print(table(header[:-1], [r[:-1] for r in rows]))
    for r in rows:
        if r[-1]:
            print(f"layer {r[0]}: fit failed: {r[-1]}")
        else:
            verdict = "convex everywhere" if r[6] else f"convex for y >= {r[5]:.6g} GB"
            print(f"layer {r[0]}: threshold 2/theta2 - Hw/cc = {r[5]:.6g} GB -> {verdict}")
    run.write_manifest("fit_error" if failed else "ok", {"failed_layers": failed})
    return EXIT_INPUT if failed else EXIT_OK


def cmd_predict(args, run: Run) -> int:
    from .prediction import (HistoricalRecord, baseline_predict, brute_force_search, build_tree, js_divergence,
                             predict_with_tree, save_tree, write_prediction_report)
    from .workload import CorpusParams, generate_clustered_corpus, trace_to_activation
    cfg = load_cfg(args)
    m = cfg.model
    clusters = args.clusters
    per = -(-(args.history + args.requests) // clusters)
    params = CorpusParams(m.num_layers, m.experts_per_layer, m.top_k, n_out=args.n_out)
    corpus = generate_clustered_corpus(clusters, per, args.skew, args.seed, params)
    corpus = [corpus[c * per + j] for j in range(per) for c in range(clusters)]
    history = [HistoricalRecord(p, trace_to_activation(t, "both")) for p, t in corpus[:args.history]]
    queries = corpus[args.history:args.history + args.requests]
    tree = build_tree(history, args.alpha, args.beta, seed=args.seed)
    save_tree(run.path("tree.json"), tree)
    dop = baseline_predict("DOP", history)
    ef = baseline_predict("EF", history, experts_per_layer=m.experts_per_layer)
    rows, evals = [], {"SPS": [], "BF": []}
    for p, t in queries:
        truth = trace_to_activation(t, "both")
        pred, res = predict_with_tree(tree, p, args.alpha)
        bf = brute_force_search(history, p, args.alpha)
        evals["SPS"].append(res.evaluations)
        evals["BF"].append(bf.evaluations)
        rows += [(p.id, "SPS", js_divergence(pred, truth)),
                 (p.id, "BF", js_divergence(baseline_predict("BF", history, p, args.alpha), truth)),
                 (p.id, "DOP", js_divergence(dop, truth)),
                 (p.id, "EF", js_divergence(ef, truth))]
    write_prediction_report(run.path("predictions.csv"), rows)
    summary = []
    for meth in ("SPS", "BF", "DOP", "EF"):
        js = [r[2] for r in rows if r[1] == meth]
        ev = float(np.mean(evals[meth])) if meth in evals else math.nan
        summary.append((meth, float(np.mean(js)), ev))
    print(table(("method", "mean_js", "mean_similarity_evals"), summary))
    run.write_manifest("ok")
    return EXIT_OK


def cmd_plan(args, run: Run) -> int:
    from .planner.pipeline import plan as make_plan, write_stage_log
    cfg = load_cfg(args)
    act, trace, n_in, n_out, rid = _request(args, cfg)
    np.savetxt(run.path("activation.csv"), act, delimiter=",", fmt="%.17g")
    if args.baseline:
        rep = baseline_cost(args.baseline, cfg, act, n_in, n_out)
        write_report_json(run.path("report.json"), rep)
        print(table(("request", "method", "total_cost", "ttft", "tpot"),
                    [(rid, rep.label, rep.total, rep.latency.ttft, rep.latency.tpot)]))
        run.write_manifest("ok", {"n_in": n_in, "n_out": n_out})
        return EXIT_OK
    res = make_plan(cfg, act, n_in, n_out, eta=args.eta, epsilon=args.epsilon)
    save_plan(run.path("plan.json"), res.plan)
    write_report_json(run.path("report.json"), res.report)
    write_stage_log(run.path("stage_log.csv"), res.stage_log)
    r = res.report
    rows = [(rid, "predicted", res.mmp.remote_ratio, cfg.platform.memory_grid_main[res.plan.main_mem_spec] // MB,
             r.total, r.latency.ttft, r.latency.tpot, res.ttft_wc, res.tpot_wc)]
    if trace is not None:
        # the same plan on the routing that actually happens, with mean overheads
        tr = evaluate(res.plan, cfg, trace)
        write_report_json(run.path("trace_report.json"), tr)
        rows.append((rid, "trace", *rows[0][2:4], tr.total, tr.latency.ttft, tr.latency.tpot, *rows[0][7:]))
    print(f"n_in={n_in} n_out={n_out}")
    print(table(("request", "routing", "remote_ratio", "main_spec_mb", "total_cost", "ttft", "tpot",
                 "ttft_wc", "tpot_wc"), rows))
    print()
    print(table(("layer", "remote", "remote_spec_mb", "replicas"),
                [(l, res.plan.remote_count(l), cfg.platform.memory_grid_remote[res.plan.remote_mem_spec[l]] // MB,
                  res.plan.replica_count[l]) for l in range(res.plan.num_layers)]))
    run.write_manifest("ok", {"n_in": n_in, "n_out": n_out})
    return EXIT_OK


def cmd_simulate(args, run: Run) -> int:
    from .planner.pipeline import plan as make_plan
    from .planner.worst import views_from_activation, wc_tpot
    from .sim import simulate, write_sim_json
    cfg = load_cfg(args)
    act, trace, n_in, n_out, rid = _request(args, cfg)
    if trace is None:
        raise ValueError("simulate needs a trace: drop --activation or pass --traces")
    if args.plan:
        plan = load_plan(args.plan)
    else:
        plan = make_plan(cfg, act, n_in, n_out, eta=args.eta, epsilon=args.epsilon).plan
        save_plan(run.path("plan.json"), plan)
    views = views_from_activation(cfg, act, plan.remote_flags, n_in)
    tpot_wc = wc_tpot(cfg, views, plan.main_mem_spec, plan.remote_mem_spec, n_out)
    analytic = evaluate(plan, cfg, trace)
    write_report_json(run.path("analytic_report.json"), analytic)
    rows = []
    for j in range(args.runs):
        res = simulate(plan, cfg, trace, args.seed + j, args.dispersion)
        if j == 0:
            write_sim_json(run.path("sim.json"), res)
        rows.append((args.seed + j, res.realized_ttft, res.realized_tpot, res.realized_cost.total,
                     res.realized_tpot <= tpot_wc))
    with open(run.path("sim_runs.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("seed", "ttft", "tpot", "total_cost", "tpot_within_worst_case"))
        for r in rows:
            wr.writerow((r[0], repr(r[1]), repr(r[2]), repr(r[3]), int(r[4])))
    lat = analytic.latency
    print(table(("request", "source", "ttft", "tpot", "total_cost"),
                [(rid, "analytic", lat.ttft, lat.tpot, analytic.total),
                 (rid, f"simulated (mean of {args.runs})", float(np.mean([r[1] for r in rows])),
                  float(np.mean([r[2] for r in rows])), float(np.mean([r[3] for r in rows])))]))
    print(f"\nworst-case TPOT estimate {tpot_wc:.6g}s; runs within it: "
          f"{sum(r[4] for r in rows)}/{len(rows)}")
    run.write_manifest("ok", {"n_in": n_in, "n_out": n_out, "runs": args.runs})
    return EXIT_OK


def cmd_compare(args, run: Run) -> int:
    from .sim import METHODS, best_baseline_reduction, compare_baselines, synthetic_requests, write_compare_csv
    cfg = load_cfg(args)
    reqs = synthetic_requests(cfg, args.requests, args.seed, n_out=args.n_out, history_size=args.history)
    methods = METHODS if not args.baseline else ("PLAN", args.baseline.upper())
    rows = compare_baselines(cfg, [(r.predicted, r.trace) for r in reqs], args.seed, methods, args.eta,
                             args.epsilon, args.jobs)
    write_compare_csv(run.path("compare.csv"), rows)
    agg = [r for r in rows if r["request_id"] == "ALL"]
    print(table(("method", "total_cost", "mean_ttft", "mean_tpot", "all_slo_met", "plan_reduction_pct"),
                [(r["method"], r["total_cost"], r["ttft"], r["tpot"], r["ttft_ok"] and r["tpot_ok"],
                  r["reduction_pct"]) for r in agg]))
    best, red = best_baseline_reduction(rows)
    print(f"\nreduction vs best baseline ({best}): {red:.2f}%")
    run.write_manifest("ok", {"requests": args.requests})
    return EXIT_OK


def cmd_oracle(args, run: Run) -> int:
    from .sim import grid_oracle_suite, lpt_oracle_suite, token_oracle_suite, write_oracle_reports
    if args.kind == "lpt":
        reports = lpt_oracle_suite(args.instances, args.max_tasks, args.seed)
    elif args.kind == "tokens":
        reports = token_oracle_suite(args.instances, args.seed)
    else:
        cfg = load_cfg(args) if args.config else preset_config("toy-6x3", args.seed)
        reports = grid_oracle_suite(cfg, args.instances, args.seed)
    write_oracle_reports(run.path("oracle.csv"), reports)
    failed = [r for r in reports if not r.passed]
    shown = reports if len(reports) <= 20 else failed[:20]
    print(table(("oracle", "instance", "oracle_value", "candidate", "ratio_or_gap", "tolerance", "pass"),
                [(r.oracle_name, r.instance_descriptor[:48], r.oracle_value, r.candidate_value, r.ratio_or_gap,
                  r.tolerance, r.passed) for r in shown]))
    worst = max(r.ratio_or_gap for r in reports)
    print(f"\n{len(reports) - len(failed)}/{len(reports)} passed; largest ratio_or_gap {worst:.6g}")
    run.write_manifest("ok" if not failed else "oracle_failed", {"kind": args.kind})
    if failed:
        raise OracleFailure(f"{len(failed)} oracle check(s) failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (overrides --preset)")
    common.add_argument("--preset", default="small-8x12", choices=PRESETS)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--jobs", type=int, default=1)

    req = argparse.ArgumentParser(add_help=False)
    req.add_argument("--activation", help="activation matrix (.npy or .csv); needs --n-in")
    req.add_argument("--traces", help="routing-trace CSV; the first trace is the request")
    req.add_argument("--n-in", type=int)
    req.add_argument("--n-out", type=int, default=200)
    req.add_argument("--history", type=int, default=200, help="history size for the synthetic request")
    req.add_argument("--eta", type=float, default=0.1)
    req.add_argument("--epsilon", type=float)

    p = argparse.ArgumentParser(prog="moeplan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit per-layer latency curves and check convexity")
    s.add_argument("--samples", help="CSV with columns layer,memory_mb,seconds (default: config profile)")
    s.add_argument("--n-in", type=int, help="input tokens used for the main-model price (default 128)")
    s.add_argument("--n-out", type=int, default=200)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="SPS prediction against baselines on a synthetic corpus")
    s.add_argument("--history", type=int, default=400)
    s.add_argument("--requests", type=int, default=50)
    s.add_argument("--clusters", type=int, default=4)
    s.add_argument("--skew", type=float, default=1.0)
    s.add_argument("--alpha", type=int, default=15)
    s.add_argument("--beta", type=int, default=64)
    s.add_argument("--n-out", type=int, default=16)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plan", parents=[common, req], help="plan one request")
    s.add_argument("--baseline", choices=[b.lower() for b in BASELINES] + list(BASELINES),
                   help="price a baseline deployment instead of planning")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", parents=[common, req], help="replay a request trace through a plan")
    s.add_argument("--plan", help="plan JSON (default: plan the request first)")
    s.add_argument("--dispersion", type=float, help="lognormal sigma of invocation overheads")
    s.add_argument("--runs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", parents=[common], help="plan + simulate many requests against the baselines")
    s.add_argument("--requests", type=int, default=50)
    s.add_argument("--n-out", type=int, default=200)
    s.add_argument("--history", type=int, default=200)
    s.add_argument("--eta", type=float, default=0.1)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--baseline", choices=[b.lower() for b in BASELINES] + list(BASELINES),
                   help="compare against this baseline only")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("oracle", parents=[common], help="check components against exact or sampled oracles")
    s.add_argument("kind", choices=("lpt", "tokens", "grid"))
    s.add_argument("--max-tasks", type=int, default=12)
    s.add_argument("--instances", type=int, help="random instances (lpt), trials (tokens) or instances (grid)")
    s.set_defaults(func=cmd_oracle)
    return p


_DEFAULT_INSTANCES = {"lpt": 10_000, "tokens": 10_000, "grid": 3}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "oracle" and args.instances is None:
        args.instances = _DEFAULT_INSTANCES[args.kind]
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    run = Run(args)
    try:
        return args.func(args, run)
    except InfeasibleError as exc:
        run.write_manifest("infeasible", {"binding_constraint": exc.constraint, "stage": exc.stage})
        print(f"infeasible ({exc.constraint}, {exc.stage} stage): {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OracleFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except INPUT_ERRORS as exc:
        run.write_manifest("input_error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:    # noqa: BLE001 - last-resort mapping to the internal exit code
        run.write_manifest("internal_error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
