"""Cost against the decode latency target on the large preset.

Tightening TPOT pushes experts back onto the main function, which then needs
more memory; loosening it lets more experts run remotely on small functions.
The all-local MIX deployment is the reference point. Its expected TPOT is
below the tightest limits, yet the planner declares them infeasible: keeping
experts local lowers the worst-case TPOT but the prefill on one function then
breaks the worst-case TTFT limit, so no remote ratio meets both.
"""
from __future__ import annotations

from dataclasses import replace

from moeplan.perf import baseline_cost
from moeplan.planner.dual import InfeasibleError
from moeplan.planner.pipeline import plan
from moeplan.presets import preset_config
from moeplan.sim import synthetic_requests

base = preset_config("large-64x27")
req = synthetic_requests(base, 1, seed=1, history_size=100)[0]
n_in, n_out = req.trace.n_in, req.trace.n_out
mix = baseline_cost("MIX", base, req.predicted, n_in, n_out)
print(f"MIX (all experts local): cost {mix.total:.4e}, TPOT {mix.latency.tpot:.4f}s\n")
print(f"{'TPOT limit':>10s} {'remote ratio':>12s} {'cost':>10s} {'vs MIX':>7s}")
for tpot in (0.08, 0.1, 0.12, 0.15, 0.2, 0.3):
    cfg = base._replace(slo=replace(base.slo, tpot_limit_seconds=tpot))
    try:
        res = plan(cfg, req.predicted, n_in, n_out)
    except InfeasibleError as exc:
        print(f"{tpot:10.3f} infeasible ({exc.constraint}, {exc.stage})")
        continue
    c = res.report.total
    print(f"{tpot:10.3f} {res.mmp.remote_ratio:12.3f} {c:10.4e} {100 * (c - mix.total) / mix.total:+6.1f}%")
