"""Synthetic model presets at the two scales used for desk experiments.

``small-8x12`` mimics a GPT-2 sized MoE (12 layers, 8 experts, top-2);
``large-64x27`` mimics a DeepSeek-V2-Lite sized MoE (27 layers, 64 routed
experts, top-6, shared experts folded into the non-expert module).
``toy-6x3`` (3 layers, 6 experts, top-2, 8 main specs) is small enough for
exhaustive search.

Expert CPU latency follows ``base * (a * exp(-rate * memory_gb) + floor)``
per token, scaled by ``n ** batch_exponent`` for batches, with a small
seeded per-layer spread and profiling jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (
    GB,
    MB,
    AffineCurve,
    Config,
    ConfigError,
    Curve,
    ExpertLatencyProfile,
    ModelSpec,
    PlatformSpec,
    SloSpec,
    memory_grid,
)

PRESETS = ("small-8x12", "large-64x27", "toy-6x3")

N_SAMPLES = np.array([0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192], dtype=float)


@dataclass(frozen=True)
class _Shape:
    layers: int
    experts: int
    top_k: int
    hidden: int
    expert_params: int
    non_expert_params: int
    kv_bytes: int
    main_mb: tuple[int, int]
    remote_mb: tuple[int, int]
    # expert CPU single-token time: amp * exp(-rate * GB) + floor
    cpu_amp: float
    cpu_rate: float
    cpu_floor: float
    batch_exponent: float
    gpu_expert_token: float
    gpu_batch_exponent: float
    nonexp_decode: float
    nonexp_prefill_fixed: float
    nonexp_prefill_per_token: float
    cpu_nonexp_decode: float
    cpu_nonexp_prefill_fixed: float
    cpu_nonexp_prefill_per_token: float
    overhead_mean: float
    slo_ttft: float
    slo_tpot: float


_SHAPES = {
    "small-8x12": _Shape(
        layers=12, experts=8, top_k=2, hidden=768,
        expert_params=2 * 768 * 3072, non_expert_params=4 * 768 * 768 + 8 * 768 + 4 * 768,
        kv_bytes=2 * 768 * 2,
        main_mb=(200, 5000), remote_mb=(200, 2000),
        cpu_amp=2.5e-3, cpu_rate=11.8665, cpu_floor=4.0e-4, batch_exponent=0.85,
        gpu_expert_token=8.0e-5, gpu_batch_exponent=0.2,
        nonexp_decode=2.5e-4, nonexp_prefill_fixed=3.0e-4, nonexp_prefill_per_token=2.0e-6,
        cpu_nonexp_decode=1.5e-3, cpu_nonexp_prefill_fixed=2.0e-3, cpu_nonexp_prefill_per_token=1.5e-5,
        overhead_mean=3.0e-4, slo_ttft=5.0, slo_tpot=0.017,
    ),
    "large-64x27": _Shape(
        layers=27, experts=64, top_k=6, hidden=2048,
        expert_params=3 * 2048 * 1408, non_expert_params=18_500_000,
        kv_bytes=576 * 2,
        main_mb=(1000, 40000), remote_mb=(1000, 5000),
        cpu_amp=5.0e-3, cpu_rate=2.4363, cpu_floor=6.0e-4, batch_exponent=0.85,
        gpu_expert_token=2.5e-4, gpu_batch_exponent=0.2,
        nonexp_decode=5.0e-4, nonexp_prefill_fixed=6.0e-4, nonexp_prefill_per_token=4.0e-6,
        cpu_nonexp_decode=3.0e-3, cpu_nonexp_prefill_fixed=4.0e-3, cpu_nonexp_prefill_per_token=6.0e-5,
        overhead_mean=3.0e-4, slo_ttft=12.0, slo_tpot=0.14,
    ),
    "toy-6x3": _Shape(
        layers=3, experts=6, top_k=2, hidden=256,
        expert_params=2 * 256 * 1024, non_expert_params=20_000_000,
        kv_bytes=2 * 256 * 2,
        main_mb=(100, 800), remote_mb=(100, 400),
        cpu_amp=2.5e-3, cpu_rate=11.8665, cpu_floor=4.0e-4, batch_exponent=0.85,
        gpu_expert_token=8.0e-5, gpu_batch_exponent=0.2,
        nonexp_decode=2.5e-4, nonexp_prefill_fixed=3.0e-4, nonexp_prefill_per_token=2.0e-6,
        cpu_nonexp_decode=1.5e-3, cpu_nonexp_prefill_fixed=2.0e-3, cpu_nonexp_prefill_per_token=1.5e-5,
        overhead_mean=3.0e-4, slo_ttft=1.0, slo_tpot=0.004,
    ),
}

BYTES_PER_PARAM = 2  # bf16
CPU_PRICE_PER_MB_SECOND = 0.0000166667 / 1024  # per GB-second list price, per MB
GPU_TO_CPU_PRICE = 3.0
NETWORK_BYTES_PER_SECOND = 1.25e9
PCIE_BYTES_PER_SECOND = 16e9
PAYLOAD_LIMIT = 6 * MB
MAX_REPLICAS = 8
DISPERSION = 0.25


def _shape(preset: str) -> _Shape:
    try:
        return _SHAPES[preset]
    except KeyError:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {PRESETS}") from None


def _affine_curve(fixed: float, per_token: float) -> Curve:
    s = fixed + per_token * N_SAMPLES
    s[0] = 0.0
    return Curve(N_SAMPLES, s)


def synthetic_model(preset: str, seed: int = 0) -> tuple[ModelSpec, ExpertLatencyProfile]:
    """Deterministic synthetic model and expert latency profile for ``preset``."""
    sh = _shape(preset)
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    L, K = sh.layers, sh.experts
    D = sh.hidden * BYTES_PER_PARAM

    layer_speed = rng.uniform(0.95, 1.05, size=L)
    expert_bytes = sh.expert_params * BYTES_PER_PARAM
    swap = Curve(N_SAMPLES, 2.0e-5 * (N_SAMPLES > 0) + N_SAMPLES * D / PCIE_BYTES_PER_SECOND)

    model = ModelSpec(
        num_layers=L,
        experts_per_layer=[K] * L,
        token_embedding_bytes=D,
        kv_cache_bytes_per_token=[sh.kv_bytes] * L,
        non_expert_memory_bytes=[sh.non_expert_params * BYTES_PER_PARAM] * L,
        expert_memory_bytes=[[expert_bytes] * K for _ in range(L)],
        top_k=sh.top_k,
        non_expert_prefill_curves=[_affine_curve(sh.nonexp_prefill_fixed, sh.nonexp_prefill_per_token)] * L,
        swap_latency_curve=swap,
        non_expert_decode_seconds=[sh.nonexp_decode] * L,
        cpu_non_expert_prefill_curves=[_affine_curve(sh.cpu_nonexp_prefill_fixed,
                                                     sh.cpu_nonexp_prefill_per_token)] * L,
        cpu_non_expert_decode_seconds=[sh.cpu_nonexp_decode] * L,
    )

    grid_gb = np.array(memory_grid(*sh.main_mb), dtype=float) / GB
    token_time = sh.cpu_amp * np.exp(-sh.cpu_rate * grid_gb) + sh.cpu_floor      # (V,)
    token_time = layer_speed[:, None] * token_time[None, :]                       # (L, V)
    jitter = rng.normal(1.0, 0.002, size=token_time.shape)
    token_time = np.minimum.accumulate(token_time * jitter, axis=1)
    batch = N_SAMPLES ** sh.batch_exponent                                       # 0 -> 0, 1 -> 1
    seconds = token_time[:, :, None] * batch[None, None, :]
    gpu = (sh.gpu_expert_token * layer_speed)[:, None] * (N_SAMPLES ** sh.gpu_batch_exponent)[None, :]
    gpu[:, 0] = 0.0
    profile = ExpertLatencyProfile(N_SAMPLES, seconds, gpu)
    return model, profile


def default_platform(preset: str, num_layers: int | None = None) -> PlatformSpec:
    sh = _shape(preset)
    L = sh.layers if num_layers is None else num_layers
    return PlatformSpec(
        memory_grid_main=memory_grid(*sh.main_mb),
        memory_grid_remote=memory_grid(*sh.remote_mb),
        grid_step_bytes=100 * MB,
        cpu_price_per_mb_second=CPU_PRICE_PER_MB_SECOND,
        gpu_price_per_mb_second=GPU_TO_CPU_PRICE * CPU_PRICE_PER_MB_SECOND,
        network_bandwidth_bytes_per_second=NETWORK_BYTES_PER_SECOND,
        payload_limit_bytes=PAYLOAD_LIMIT,
        invocation_overhead_mean_seconds=[sh.overhead_mean] * L,
        invocation_overhead_dispersion=DISPERSION,
        max_replicas=MAX_REPLICAS,
        cold_start_curve=AffineCurve(0.5, 0.25 / GB),
    )


def default_slo(preset: str) -> SloSpec:
    sh = _shape(preset)
    return SloSpec(sh.slo_ttft, sh.slo_tpot)


def preset_config(preset: str, seed: int = 0) -> Config:
    model, profile = synthetic_model(preset, seed)
    return Config(model, default_platform(preset, model.num_layers), default_slo(preset), profile)
