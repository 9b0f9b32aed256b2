"""Cost-aware planning of Mixture-of-Experts inference on serverless platforms.

The main model (non-expert layers on a GPU, a share of the experts on the
container's CPU) runs in one function; the remaining experts of every layer
live in separate CPU-only functions that can be replicated for prefill.
"""

from .config import (GB, MB, AffineCurve, Config, ConfigError, Curve, ExpertLatencyProfile, ModelSpec,
                     PlatformSpec, SloSpec, load_config, save_config)
from .perf import (CostReport, DeploymentPlan, LatencyBreakdown, baseline_cost, check_constraints, evaluate,
                   load_plan, save_plan)
from .presets import PRESETS, preset_config
from .workload import Prompt, RoutingTrace, sample_routing, trace_to_activation

__version__ = "0.1.0"

__all__ = [
    "GB", "MB", "AffineCurve", "Config", "ConfigError", "CostReport", "Curve", "DeploymentPlan",
    "ExpertLatencyProfile", "LatencyBreakdown", "ModelSpec", "PRESETS", "PlatformSpec", "Prompt", "RoutingTrace",
    "SloSpec", "baseline_cost", "check_constraints", "evaluate", "load_config", "load_plan", "preset_config",
    "sample_routing", "save_config", "save_plan", "trace_to_activation", "__version__",
]
