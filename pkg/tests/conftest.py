from __future__ import annotations

import numpy as np
import pytest

from moeplan.config import (MB, AffineCurve, Config, Curve, ExpertLatencyProfile, ModelSpec, PlatformSpec,
                            SloSpec)
from moeplan.presets import preset_config

# Per-token expert time on main specs 100..400 MB; batch time is linear in n.
HAND_TOKEN_TIME = (0.010, 0.008, 0.006, 0.005)


def hand_config(ttft: float = 10.0, tpot: float = 1.0, cold_slope: float = 1e-9) -> Config:
    """Two layers of three 50 MB experts with every timing linear and round, for hand arithmetic."""
    n = np.array([0.0, 1.0, 1000.0])
    model = ModelSpec(
        num_layers=2,
        experts_per_layer=(3, 3),
        token_embedding_bytes=1000,
        kv_cache_bytes_per_token=(100, 100),
        non_expert_memory_bytes=(10 * MB, 10 * MB),
        expert_memory_bytes=([50 * MB] * 3, [50 * MB] * 3),
        top_k=1,
        non_expert_prefill_curves=(Curve(n, 1e-3 * n),) * 2,
        swap_latency_curve=Curve(n, 1e-4 * n),
        non_expert_decode_seconds=(0.002, 0.002),
        cpu_non_expert_prefill_curves=(Curve(n, 2e-3 * n),) * 2,
        cpu_non_expert_decode_seconds=(0.004, 0.004),
    )
    seconds = np.array([[[t * x for x in n] for t in HAND_TOKEN_TIME]] * 2)
    profile = ExpertLatencyProfile(n, seconds, np.array([1e-3 * n] * 2))
    platform = PlatformSpec(
        memory_grid_main=tuple(m * MB for m in (100, 200, 300, 400)),
        memory_grid_remote=tuple(m * MB for m in (100, 200)),
        grid_step_bytes=100 * MB,
        cpu_price_per_mb_second=1e-6,
        gpu_price_per_mb_second=3e-6,
        network_bandwidth_bytes_per_second=1e6,
        payload_limit_bytes=10_000,
        invocation_overhead_mean_seconds=(0.05, 0.05),
        invocation_overhead_dispersion=0.25,
        max_replicas=4,
        cold_start_curve=AffineCurve(0.5, cold_slope),
    )
    return Config(model, platform, SloSpec(ttft, tpot), profile)


@pytest.fixture
def hand_cfg() -> Config:
    return hand_config()


@pytest.fixture(scope="session")
def small_cfg() -> Config:
    return preset_config("small-8x12")


@pytest.fixture(scope="session")
def large_cfg() -> Config:
    return preset_config("large-64x27")


@pytest.fixture(scope="session")
def toy_cfg() -> Config:
    return preset_config("toy-6x3")


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
