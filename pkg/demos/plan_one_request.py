"""Plan a single request on the small preset and replay it through the simulator.

Walks the pipeline stage by stage: activation prediction from history, the
remote/local split, remote memory and replica choices, then the cost against
the four baselines and 20 noisy replays of the realized routing.
"""
from __future__ import annotations

import numpy as np

from moeplan.config import MB
from moeplan.perf import BASELINES, baseline_cost, evaluate
from moeplan.planner.pipeline import plan
from moeplan.presets import preset_config
from moeplan.sim import simulate, synthetic_requests

cfg = preset_config("small-8x12")
req = synthetic_requests(cfg, 1, seed=0, history_size=200)[0]
n_in, n_out = req.trace.n_in, req.trace.n_out
print(f"request {req.prompt_id}: {n_in} prompt tokens, {n_out} output tokens")
print(f"SLO: TTFT <= {cfg.slo.ttft_limit_seconds}s, TPOT <= {cfg.slo.tpot_limit_seconds}s\n")

res = plan(cfg, req.predicted, n_in, n_out)
p = res.plan
print(f"remote ratio {res.mmp.remote_ratio:.3f}, main function "
      f"{cfg.platform.memory_grid_main[p.main_mem_spec] // MB} MB")
for l in range(p.num_layers):
    print(f"  layer {l:2d}: {p.remote_count(l)} remote experts, "
          f"{cfg.platform.memory_grid_remote[p.remote_mem_spec[l]] // MB:4d} MB, {p.replica_count[l]} replica(s)")
print(f"worst-case TTFT {res.ttft_wc:.3f}s, TPOT {res.tpot_wc:.4f}s\n")

# what the request costs once the real routing is known
actual = evaluate(p, cfg, req.trace)
print(f"{'method':6s} {'cost':>10s} {'ttft':>8s} {'tpot':>8s}")
print(f"{'PLAN':6s} {actual.total:10.3e} {actual.latency.ttft:8.3f} {actual.latency.tpot:8.4f}")
for kind in BASELINES:
    r = baseline_cost(kind, cfg, req.trace)
    print(f"{kind:6s} {r.total:10.3e} {r.latency.ttft:8.3f} {r.latency.tpot:8.4f}")

runs = [simulate(p, cfg, req.trace, seed) for seed in range(20)]
tpots = np.array([r.realized_tpot for r in runs])
print(f"\n20 replays with random invocation overheads: TPOT {tpots.mean():.4f}s mean, "
      f"{tpots.max():.4f}s max, {np.mean(tpots <= res.tpot_wc):.0%} within the worst-case estimate")
