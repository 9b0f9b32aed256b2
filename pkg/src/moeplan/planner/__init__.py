"""Deployment planning for a single request."""

from .bounds import BoundError, worst_case_count, worst_case_fraction, worst_case_tokens
from .dual import DualSolution, InfeasibleError, TpotCoupling, optimize_remote_memory
from .fitting import FitError, FittedCurve, convexity_check, fit_curve, fit_exponential, g, g_prime, g_second
from .mmp import MMPResult, mmp_preallocate, ratio_ladder
from .pipeline import PlanResult, decide_replicas, plan, select_remote, write_stage_log
from .replicas import ReplicaDecision, lpt_partition, worst_case_replica_time

__all__ = [
    "BoundError", "DualSolution", "FitError", "FittedCurve", "InfeasibleError", "MMPResult", "PlanResult",
    "ReplicaDecision", "TpotCoupling", "convexity_check", "decide_replicas", "fit_curve", "fit_exponential",
    "g", "g_prime", "g_second", "lpt_partition", "mmp_preallocate", "optimize_remote_memory", "plan",
    "ratio_ladder", "select_remote", "worst_case_count", "worst_case_fraction", "worst_case_replica_time",
    "worst_case_tokens", "write_stage_log",
]
