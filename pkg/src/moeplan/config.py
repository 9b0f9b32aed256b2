"""Static model, platform, pricing and SLO parameters.

Everything here is immutable after construction and validated eagerly:
an invariant violation raises :class:`ConfigError` naming the offending
field. Memory is accounted in bytes; MB (2**20 bytes) appears only at the
pricing boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

MB = 1 << 20
GB = 1 << 30

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised when a configuration violates its documented invariants."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Curve:
    """Piecewise-linear latency table ``n -> seconds``.

    Linear interpolation between samples, clamped (constant) beyond the
    first and last sample.
    """

    n: np.ndarray
    seconds: np.ndarray

    def __post_init__(self):
        n = _frozen(self.n)
        s = _frozen(self.seconds)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "seconds", s)
        if n.ndim != 1 or n.shape != s.shape or n.size < 1:
            raise ConfigError("curve: n and seconds must be equal-length 1-D tables")
        if np.any(np.diff(n) <= 0):
            raise ConfigError("curve: sample points must be strictly increasing")
        if np.any(s < 0):
            raise ConfigError("curve: latencies must be non-negative")
        if np.any(np.diff(s) < 0):
            raise ConfigError("curve: latencies must be non-decreasing in n")

    def __call__(self, x):
        out = np.interp(x, self.n, self.seconds)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"n": self.n.tolist(), "seconds": self.seconds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Curve":
        return cls(d["n"], d["seconds"])


@dataclass(frozen=True)
class AffineCurve:
    """``bytes -> seconds`` as ``intercept + slope * bytes``."""

    intercept: float
    slope: float

    def __post_init__(self):
        if self.intercept < 0 or self.slope < 0:
            raise ConfigError("cold_start_curve: coefficients must be non-negative")

    def __call__(self, x):
        return self.intercept + self.slope * x

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "slope": self.slope}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineCurve":
        return cls(float(d["intercept"]), float(d["slope"]))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    num_layers: int
    experts_per_layer: tuple[int, ...]
    token_embedding_bytes: int
    kv_cache_bytes_per_token: tuple[int, ...]
    non_expert_memory_bytes: tuple[int, ...]
    expert_memory_bytes: tuple[np.ndarray, ...]
    top_k: int
    non_expert_prefill_curves: tuple[Curve, ...]
    swap_latency_curve: Curve
    non_expert_decode_seconds: tuple[float, ...]
    # CPU-side non-expert timings, only used by the CPU baseline.
    cpu_non_expert_prefill_curves: tuple[Curve, ...] | None = None
    cpu_non_expert_decode_seconds: tuple[float, ...] | None = None

    def __post_init__(self):
        L = self.num_layers
        if not isinstance(L, (int, np.integer)) or L < 1:
            raise ConfigError("num_layers: must be a positive integer")
        object.__setattr__(self, "experts_per_layer", tuple(int(k) for k in self.experts_per_layer))
        object.__setattr__(self, "kv_cache_bytes_per_token", tuple(int(a) for a in self.kv_cache_bytes_per_token))
        object.__setattr__(self, "non_expert_memory_bytes", tuple(int(a) for a in self.non_expert_memory_bytes))
        object.__setattr__(self, "non_expert_decode_seconds", tuple(float(a) for a in self.non_expert_decode_seconds))
        object.__setattr__(self, "expert_memory_bytes",
                           tuple(_frozen(m, dtype=np.int64) for m in self.expert_memory_bytes))
        object.__setattr__(self, "non_expert_prefill_curves", tuple(self.non_expert_prefill_curves))
        for name in ("experts_per_layer", "kv_cache_bytes_per_token", "non_expert_memory_bytes",
                     "expert_memory_bytes", "non_expert_prefill_curves", "non_expert_decode_seconds"):
            if len(getattr(self, name)) != L:
                raise ConfigError(f"{name}: expected {L} entries, got {len(getattr(self, name))}")
        if self.top_k < 1:
            raise ConfigError("top_k: must be a positive integer")
        if self.token_embedding_bytes < 1:
            raise ConfigError("token_embedding_bytes: must be positive")
        for l, K in enumerate(self.experts_per_layer):
            if K < self.top_k:
                raise ConfigError(f"experts_per_layer[{l}]: {K} < top_k={self.top_k}")
            if len(self.expert_memory_bytes[l]) != K:
                raise ConfigError(f"expert_memory_bytes[{l}]: expected {K} entries")
            if np.any(self.expert_memory_bytes[l] <= 0):
                raise ConfigError(f"expert_memory_bytes[{l}]: must be strictly positive")
        if min(self.kv_cache_bytes_per_token) < 0 or min(self.non_expert_memory_bytes) < 0:
            raise ConfigError("kv_cache_bytes_per_token/non_expert_memory_bytes: must be non-negative")
        if min(self.non_expert_decode_seconds) < 0:
            raise ConfigError("non_expert_decode_seconds: must be non-negative")
        if self.cpu_non_expert_prefill_curves is not None:
            object.__setattr__(self, "cpu_non_expert_prefill_curves", tuple(self.cpu_non_expert_prefill_curves))
            object.__setattr__(self, "cpu_non_expert_decode_seconds",
                               tuple(float(a) for a in self.cpu_non_expert_decode_seconds))
            if len(self.cpu_non_expert_prefill_curves) != L or len(self.cpu_non_expert_decode_seconds) != L:
                raise ConfigError("cpu_non_expert_*: expected one entry per layer")

    @property
    def total_expert_bytes(self) -> int:
        return int(sum(int(m.sum()) for m in self.expert_memory_bytes))

    @property
    def total_non_expert_bytes(self) -> int:
        return int(sum(self.non_expert_memory_bytes))

    def gpu_memory_bytes(self, n_in: int, n_out: int) -> int:
        """GPU memory of the main model: token/kv-cache data plus non-expert weights."""
        per_token = self.token_embedding_bytes + sum(self.kv_cache_bytes_per_token)
        return (n_in + n_out) * per_token + self.total_non_expert_bytes


@dataclass(frozen=True, eq=False)
class PlatformSpec:
    memory_grid_main: tuple[int, ...]
    memory_grid_remote: tuple[int, ...]
    grid_step_bytes: int
    cpu_price_per_mb_second: float
    gpu_price_per_mb_second: float
    network_bandwidth_bytes_per_second: float
    payload_limit_bytes: int
    invocation_overhead_mean_seconds: tuple[float, ...]
    invocation_overhead_dispersion: float
    max_replicas: int
    cold_start_curve: AffineCurve
    vcpu_per_gb: int = 1

    def __post_init__(self):
        object.__setattr__(self, "memory_grid_main", tuple(int(m) for m in self.memory_grid_main))
        object.__setattr__(self, "memory_grid_remote", tuple(int(m) for m in self.memory_grid_remote))
        object.__setattr__(self, "invocation_overhead_mean_seconds",
                           tuple(float(t) for t in self.invocation_overhead_mean_seconds))
        main, rem = self.memory_grid_main, self.memory_grid_remote
        if len(main) < 2 or any(b <= a for a, b in zip(main, main[1:])):
            raise ConfigError("memory_grid_main: must be strictly increasing with >= 2 specs")
        if main[0] <= 0:
            raise ConfigError("memory_grid_main: specs must be positive")
        if not rem or len(rem) >= len(main) or tuple(main[:len(rem)]) != rem:
            raise ConfigError("memory_grid_remote: remote grid must be strict prefix of memory_grid_main")
        for name in ("grid_step_bytes", "cpu_price_per_mb_second", "gpu_price_per_mb_second",
                     "network_bandwidth_bytes_per_second", "payload_limit_bytes", "max_replicas"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.invocation_overhead_dispersion < 0:
            raise ConfigError("invocation_overhead_dispersion: must be non-negative")
        if min(self.invocation_overhead_mean_seconds, default=0.0) < 0:
            raise ConfigError("invocation_overhead_mean_seconds: must be non-negative")
        if self.vcpu_per_gb != 1:
            raise ConfigError("vcpu_per_gb: fixed at 1")

    @property
    def num_remote_specs(self) -> int:
        return len(self.memory_grid_remote)

    def main_spec_at_least(self, nbytes: float) -> int | None:
        """Smallest main-grid index whose memory is >= ``nbytes`` (None if above the grid)."""
        idx = int(np.searchsorted(self.memory_grid_main, nbytes, side="left"))
        return idx if idx < len(self.memory_grid_main) else None

    def remote_spec_at_least(self, nbytes: float) -> int | None:
        idx = int(np.searchsorted(self.memory_grid_remote, nbytes, side="left"))
        return idx if idx < len(self.memory_grid_remote) else None

    def with_prices(self, cpu: float | None = None, gpu: float | None = None) -> "PlatformSpec":
        return replace(self,
                       cpu_price_per_mb_second=self.cpu_price_per_mb_second if cpu is None else cpu,
                       gpu_price_per_mb_second=self.gpu_price_per_mb_second if gpu is None else gpu)


@dataclass(frozen=True)
class SloSpec:
    ttft_limit_seconds: float
    tpot_limit_seconds: float

    def __post_init__(self):
        if not (self.ttft_limit_seconds > 0 and self.tpot_limit_seconds > 0):
            raise ConfigError("slo: ttft_limit_seconds and tpot_limit_seconds must be positive")


@dataclass(frozen=True, eq=False)
class ExpertLatencyProfile:
    """Expert compute time per (layer, main-grid memory spec).

    ``seconds[l, v, s]`` is the time for one expert of layer ``l`` to process
    ``n_samples[s]`` tokens with memory spec ``v``. Remote specs index the
    same table because the remote grid is a prefix of the main grid.
    """

    n_samples: np.ndarray
    seconds: np.ndarray
    # Expert timings on the GPU, only used by the GPU/FETCH baselines.
    gpu_seconds: np.ndarray | None = None

    def __post_init__(self):
        n = _frozen(self.n_samples)
        s = _frozen(self.seconds)
        object.__setattr__(self, "n_samples", n)
        object.__setattr__(self, "seconds", s)
        if s.ndim != 3 or s.shape[2] != n.size:
            raise ConfigError("profile.seconds: expected shape (layers, specs, samples)")
        if np.any(np.diff(n) <= 0):
            raise ConfigError("profile.n_samples: must be strictly increasing")
        if 1.0 not in n:
            raise ConfigError("profile.n_samples: must include n=1 (single-token time)")
        if np.any(s < 0):
            raise ConfigError("profile.seconds: must be non-negative")
        if np.any(np.diff(s, axis=2) < 0):
            raise ConfigError("profile.seconds: must be non-decreasing in n")
        if np.any(np.diff(s, axis=1) > 1e-12 * np.maximum(s[:, 1:, :], 1.0)):
            raise ConfigError("profile.seconds: must be non-increasing in memory spec")
        if self.gpu_seconds is not None:
            g = _frozen(self.gpu_seconds)
            object.__setattr__(self, "gpu_seconds", g)
            if g.shape != (s.shape[0], n.size):
                raise ConfigError("profile.gpu_seconds: expected shape (layers, samples)")
            if np.any(np.diff(g, axis=1) < 0) or np.any(g < 0):
                raise ConfigError("profile.gpu_seconds: must be non-negative and non-decreasing in n")

    @property
    def num_layers(self) -> int:
        return self.seconds.shape[0]

    @property
    def num_specs(self) -> int:
        return self.seconds.shape[1]

    def batch(self, layer: int, spec: int, n):
        """tau^c_{l,v}(n): time for one expert to process ``n`` tokens."""
        out = np.interp(n, self.n_samples, self.seconds[layer, spec])
        return float(out) if np.ndim(out) == 0 else out

    def single_token(self, layer: int, spec: int) -> float:
        """t^c_{l,v}: time for one expert to process a single token."""
        return self.batch(layer, spec, 1.0)

    def single_token_table(self) -> np.ndarray:
        """(layers, specs) array of single-token times."""
        idx = int(np.searchsorted(self.n_samples, 1.0))
        return self.seconds[:, :, idx]

    def gpu_batch(self, layer: int, n):
        if self.gpu_seconds is None:
            raise ConfigError("profile.gpu_seconds: GPU expert profile not configured")
        out = np.interp(n, self.n_samples, self.gpu_seconds[layer])
        return float(out) if np.ndim(out) == 0 else out


class Config(NamedTuple):
    model: ModelSpec
    platform: PlatformSpec
    slo: SloSpec
    profile: ExpertLatencyProfile


def _check_profile_fits(model: ModelSpec, platform: PlatformSpec, profile: ExpertLatencyProfile):
    if profile.num_layers != model.num_layers:
        raise ConfigError("profile.seconds: layer count differs from model.num_layers")
    if profile.num_specs != len(platform.memory_grid_main):
        raise ConfigError("profile.seconds: spec count differs from memory_grid_main")
    if len(platform.invocation_overhead_mean_seconds) != model.num_layers:
        raise ConfigError("invocation_overhead_mean_seconds: expected one entry per layer")


def validate(model: ModelSpec, platform: PlatformSpec, slo: SloSpec,
             profile: ExpertLatencyProfile) -> Config:
    _check_profile_fits(model, platform, profile)
    return Config(model, platform, slo, profile)


# --------------------------------------------------------------------------
# JSON (de)serialisation

def _model_to_dict(m: ModelSpec) -> dict:
    d = {
        "num_layers": m.num_layers,
        "experts_per_layer": list(m.experts_per_layer),
        "token_embedding_bytes": m.token_embedding_bytes,
        "kv_cache_bytes_per_token": list(m.kv_cache_bytes_per_token),
        "non_expert_memory_bytes": list(m.non_expert_memory_bytes),
        "expert_memory_bytes": [e.tolist() for e in m.expert_memory_bytes],
        "top_k": m.top_k,
        "non_expert_prefill_curves": [c.to_dict() for c in m.non_expert_prefill_curves],
        "swap_latency_curve": m.swap_latency_curve.to_dict(),
        "non_expert_decode_seconds": list(m.non_expert_decode_seconds),
    }
    if m.cpu_non_expert_prefill_curves is not None:
        d["cpu_non_expert_prefill_curves"] = [c.to_dict() for c in m.cpu_non_expert_prefill_curves]
        d["cpu_non_expert_decode_seconds"] = list(m.cpu_non_expert_decode_seconds)
    return d


def _model_from_dict(d: dict) -> ModelSpec:
    if "token_embedding_bytes" in d:
        D = d["token_embedding_bytes"]
    elif "hidden_size" in d:
        bits = d.get("embedding_bits", 16)
        if bits % 8:
            raise ConfigError("embedding_bits: must be a multiple of 8")
        D = d["hidden_size"] * bits // 8
    else:
        raise ConfigError("token_embedding_bytes: missing (or give hidden_size + embedding_bits)")
    cpu_curves = d.get("cpu_non_expert_prefill_curves")
    return ModelSpec(
        num_layers=d["num_layers"],
        experts_per_layer=d["experts_per_layer"],
        token_embedding_bytes=D,
        kv_cache_bytes_per_token=d["kv_cache_bytes_per_token"],
        non_expert_memory_bytes=d["non_expert_memory_bytes"],
        expert_memory_bytes=d["expert_memory_bytes"],
        top_k=d["top_k"],
        non_expert_prefill_curves=[Curve.from_dict(c) for c in d["non_expert_prefill_curves"]],
        swap_latency_curve=Curve.from_dict(d["swap_latency_curve"]),
        non_expert_decode_seconds=d["non_expert_decode_seconds"],
        cpu_non_expert_prefill_curves=None if cpu_curves is None else [Curve.from_dict(c) for c in cpu_curves],
        cpu_non_expert_decode_seconds=d.get("cpu_non_expert_decode_seconds"),
    )


def _platform_to_dict(p: PlatformSpec) -> dict:
    return {
        "memory_grid_main": list(p.memory_grid_main),
        "memory_grid_remote": list(p.memory_grid_remote),
        "grid_step_bytes": p.grid_step_bytes,
        "cpu_price_per_mb_second": p.cpu_price_per_mb_second,
        "gpu_price_per_mb_second": p.gpu_price_per_mb_second,
        "network_bandwidth_bytes_per_second": p.network_bandwidth_bytes_per_second,
        "payload_limit_bytes": p.payload_limit_bytes,
        "invocation_overhead_mean_seconds": list(p.invocation_overhead_mean_seconds),
        "invocation_overhead_dispersion": p.invocation_overhead_dispersion,
        "max_replicas": p.max_replicas,
        "cold_start_curve": p.cold_start_curve.to_dict(),
        "vcpu_per_gb": p.vcpu_per_gb,
    }


def _platform_from_dict(d: dict) -> PlatformSpec:
    return PlatformSpec(
        memory_grid_main=d["memory_grid_main"],
        memory_grid_remote=d["memory_grid_remote"],
        grid_step_bytes=d["grid_step_bytes"],
        cpu_price_per_mb_second=float(d["cpu_price_per_mb_second"]),
        gpu_price_per_mb_second=float(d["gpu_price_per_mb_second"]),
        network_bandwidth_bytes_per_second=float(d["network_bandwidth_bytes_per_second"]),
        payload_limit_bytes=d["payload_limit_bytes"],
        invocation_overhead_mean_seconds=d["invocation_overhead_mean_seconds"],
        invocation_overhead_dispersion=float(d["invocation_overhead_dispersion"]),
        max_replicas=d["max_replicas"],
        cold_start_curve=AffineCurve.from_dict(d["cold_start_curve"]),
        vcpu_per_gb=d.get("vcpu_per_gb", 1),
    )


def _profile_to_dict(p: ExpertLatencyProfile) -> dict:
    d = {"n_samples": p.n_samples.tolist(), "seconds": p.seconds.tolist()}
    if p.gpu_seconds is not None:
        d["gpu_seconds"] = p.gpu_seconds.tolist()
    return d


def _profile_from_dict(d: dict) -> ExpertLatencyProfile:
    return ExpertLatencyProfile(d["n_samples"], d["seconds"], d.get("gpu_seconds"))


def config_to_dict(model: ModelSpec, platform: PlatformSpec, slo: SloSpec,
                   profile: ExpertLatencyProfile) -> dict:
    return {
        "version": CONFIG_VERSION,
        "model": _model_to_dict(model),
        "platform": _platform_to_dict(platform),
        "slo": {"ttft_limit_seconds": slo.ttft_limit_seconds, "tpot_limit_seconds": slo.tpot_limit_seconds},
        "profile": _profile_to_dict(profile),
    }


def config_from_dict(d: dict) -> Config:
    from .schema import validate_config_document
    validate_config_document(d)
    try:
        model = _model_from_dict(d["model"])
        platform = _platform_from_dict(d["platform"])
        slo = SloSpec(float(d["slo"]["ttft_limit_seconds"]), float(d["slo"]["tpot_limit_seconds"]))
        profile = _profile_from_dict(d["profile"])
    except KeyError as exc:
        raise ConfigError(f"{exc.args[0]}: missing field") from None
    return validate(model, platform, slo, profile)


def save_config(path, model: ModelSpec, platform: PlatformSpec, slo: SloSpec,
                profile: ExpertLatencyProfile) -> None:
    Path(path).write_text(json.dumps(config_to_dict(model, platform, slo, profile), indent=1))


def load_config(path) -> Config:
    """Load and validate a JSON config file.

    Returns ``(model, platform, slo, profile)`` as a :class:`Config` tuple.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return config_from_dict(doc)


def memory_grid(lo_mb: int, hi_mb: int, step_mb: int = 100) -> tuple[int, ...]:
    """Memory ladder from ``lo_mb`` to ``hi_mb`` inclusive, in bytes."""
    count = (hi_mb - lo_mb) // step_mb + 1
    return tuple((lo_mb + i * step_mb) * MB for i in range(count))


def bytes_to_mb(nbytes) -> float:
    return nbytes / MB


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
