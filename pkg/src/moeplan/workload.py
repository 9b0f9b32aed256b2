"""Prompts, routing traces and activation matrices.

A routing trace stores, for every layer and token, the ``top_k`` distinct
experts the gate picked. An activation matrix is a plain ``(layers,
experts)`` float array whose rows are the linear-scaling activation
frequencies (each row sums to 1). Layers with fewer experts than the widest
layer are zero-padded on the right.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CORPUS_VERSION = 1


class TraceError(ValueError):
    """Invalid routing trace or activation matrix."""


@dataclass(frozen=True, eq=False)
class Prompt:
    id: str
    embeddings: np.ndarray
    cluster: int | None = None

    def __post_init__(self):
        e = np.array(self.embeddings, dtype=float)
        if e.ndim != 2 or e.shape[0] < 1:
            raise TraceError(f"prompt {self.id}: embedding matrix must be (tokens, dim) with >= 1 token")
        norms = np.linalg.norm(e, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise TraceError(f"prompt {self.id}: embedding rows must have unit L2 norm")
        e.setflags(write=False)
        object.__setattr__(self, "embeddings", e)

    @property
    def token_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @cached_property
    def summary(self) -> np.ndarray:
        """Sum of the token embeddings; all soft-cosine terms reduce to dot products of these."""
        return self.embeddings.sum(axis=0)


def _as_assignments(a, top_k: int, what: str) -> np.ndarray:
    try:
        arr = np.asarray(a, dtype=np.int64)
    except (ValueError, TypeError):
        raise TraceError(f"{what}: every token must be assigned exactly top_k={top_k} experts") from None
    if arr.size == 0:
        return np.zeros((arr.shape[0] if arr.ndim >= 1 else 0, 0, top_k), dtype=np.int64)
    if arr.ndim != 3 or arr.shape[2] != top_k:
        raise TraceError(f"{what}: every token must be assigned exactly top_k={top_k} experts")
    srt = np.sort(arr, axis=2)
    if top_k > 1 and np.any(srt[:, :, 1:] == srt[:, :, :-1]):
        raise TraceError(f"{what}: a token's top_k experts must be distinct")
    return arr


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    """Ground-truth routing: ``prefill[l, i]`` holds token ``i``'s experts at layer ``l``."""

    prompt_id: str
    prefill: np.ndarray
    decode: np.ndarray
    experts_per_layer: tuple[int, ...]
    top_k: int

    def __post_init__(self):
        K = tuple(int(k) for k in self.experts_per_layer)
        object.__setattr__(self, "experts_per_layer", K)
        pre = _as_assignments(self.prefill, self.top_k, f"trace {self.prompt_id} prefill")
        dec = _as_assignments(self.decode, self.top_k, f"trace {self.prompt_id} decode")
        for name, arr in (("prefill", pre), ("decode", dec)):
            if arr.shape[0] != len(K):
                raise TraceError(f"trace {self.prompt_id} {name}: expected {len(K)} layers")
            if arr.size and (arr.min() < 0 or np.any(arr.max(axis=(1, 2)) >= np.array(K))):
                raise TraceError(f"trace {self.prompt_id} {name}: expert index out of range")
            arr.setflags(write=False)
        if pre.shape[1] != 0 and dec.shape[1] != 0 and pre.shape[0] != dec.shape[0]:
            raise TraceError(f"trace {self.prompt_id}: prefill/decode layer mismatch")
        object.__setattr__(self, "prefill", pre)
        object.__setattr__(self, "decode", dec)

    @property
    def num_layers(self) -> int:
        return len(self.experts_per_layer)

    @property
    def n_in(self) -> int:
        return self.prefill.shape[1]

    @property
    def n_out(self) -> int:
        return self.decode.shape[1]

    def counts(self, phase: str = "prefill") -> np.ndarray:
        """(layers, max_experts) activation counts for ``phase``."""
        Kmax = max(self.experts_per_layer)
        out = np.zeros((self.num_layers, Kmax), dtype=np.int64)
        arrays = {"prefill": [self.prefill], "decode": [self.decode],
                  "both": [self.prefill, self.decode]}
        if phase not in arrays:
            raise TraceError(f"phase: expected prefill|decode|both, got {phase!r}")
        for arr in arrays[phase]:
            for l in range(self.num_layers):
                out[l] += np.bincount(arr[l].ravel(), minlength=Kmax)[:Kmax]
        return out

    def decode_indicator(self) -> np.ndarray:
        """(layers, n_out, max_experts) 0/1 array: s_{l,k,i} for decode tokens."""
        Kmax = max(self.experts_per_layer)
        ind = np.zeros((self.num_layers, self.n_out, Kmax), dtype=np.int8)
        if self.n_out:
            l_idx = np.arange(self.num_layers)[:, None, None]
            t_idx = np.arange(self.n_out)[None, :, None]
            ind[l_idx, t_idx, self.decode] = 1
        return ind


def validate_activation(a, experts_per_layer: Sequence[int] | None = None) -> np.ndarray:
    """Return ``a`` as a float array after checking the activation-matrix invariants."""
    arr = np.array(a, dtype=float)
    if arr.ndim != 2:
        raise TraceError("activation: expected a (layers, experts) matrix")
    if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
        raise TraceError("activation: entries must lie in [0, 1]")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
        raise TraceError("activation: each row must sum to 1")
    if experts_per_layer is not None:
        if arr.shape[0] != len(experts_per_layer):
            raise TraceError("activation: layer count mismatch")
        for l, K in enumerate(experts_per_layer):
            if K > arr.shape[1] or np.any(arr[l, K:] != 0):
                raise TraceError(f"activation: row {l} has mass beyond expert {K - 1}")
    return arr


def trace_to_activation(trace: RoutingTrace, phase: str = "prefill") -> np.ndarray:
    """Linear-scaling activation frequencies: hits / (tokens * top_k) per layer."""
    counts = trace.counts(phase)
    n_tokens = {"prefill": trace.n_in, "decode": trace.n_out, "both": trace.n_in + trace.n_out}[phase]
    if n_tokens == 0:
        raise TraceError(f"trace {trace.prompt_id}: no {phase} tokens")
    return counts / float(n_tokens * trace.top_k)


def uniform_activation(experts_per_layer: Sequence[int]) -> np.ndarray:
    Kmax = max(experts_per_layer)
    out = np.zeros((len(experts_per_layer), Kmax))
    for l, K in enumerate(experts_per_layer):
        out[l, :K] = 1.0 / K
    return out


def _sample_topk(rng: np.random.Generator, weights: np.ndarray, n: int, top_k: int) -> np.ndarray:
    """Successive sampling without replacement via Gumbel top-k; shape (n, top_k)."""
    g = rng.gumbel(size=(n, weights.size))
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    # zero-weight experts only fill slots once every positive one is taken
    keys = np.where(weights > 0, logw, -1e4) + g
    idx = np.argpartition(-keys, top_k - 1, axis=1)[:, :top_k] if top_k < weights.size else \
        np.tile(np.arange(weights.size), (n, 1))
    order = np.argsort(-np.take_along_axis(keys, idx, axis=1), axis=1)
    return np.take_along_axis(idx, order, axis=1)


def sample_routing(activation, n_tokens: int, top_k: int, seed: int, n_out: int = 0,
                   experts_per_layer: Sequence[int] | None = None,
                   prompt_id: str = "sampled") -> RoutingTrace:
    """Draw a routing trace whose per-token top_k experts follow ``activation`` rows."""
    act = validate_activation(activation)
    L, Kmax = act.shape
    K = tuple(experts_per_layer) if experts_per_layer is not None else (Kmax,) * L
    if any(top_k > k for k in K):
        raise TraceError(f"top_k={top_k} exceeds experts per layer {min(K)}")
    rng = np.random.default_rng(seed)
    pre = np.empty((L, n_tokens, top_k), dtype=np.int64)
    dec = np.empty((L, n_out, top_k), dtype=np.int64)
    for l in range(L):
        w = act[l, :K[l]]
        pre[l] = _sample_topk(rng, w, n_tokens, top_k)
        dec[l] = _sample_topk(rng, w, n_out, top_k)
    return RoutingTrace(prompt_id, pre, dec, K, top_k)


# --------------------------------------------------------------------------
# synthetic clustered corpus

@dataclass(frozen=True)
class CorpusParams:
    num_layers: int
    experts_per_layer: tuple[int, ...]
    top_k: int
    dim: int = 64
    min_tokens: int = 16
    max_tokens: int = 64
    n_out: int = 16
    prompt_spread: float = 0.5
    token_spread: float = 1.0
    semantic_gain: float = 1.5


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_clustered_corpus(num_clusters: int, prompts_per_cluster: int, skew: float, seed: int,
                              params: CorpusParams) -> list[tuple[Prompt, RoutingTrace]]:
    """Prompts grouped around cluster directions with cluster-specific expert preferences.

    Each cluster draws a per-layer expert preference from a symmetric
    Dirichlet with concentration ``1/skew``; each prompt tilts that preference
    along a fixed random projection of its offset from the cluster centroid,
    so semantic closeness carries over to activation closeness. ``skew=0``
    makes every preference uniform.
    """
    if num_clusters < 1 or prompts_per_cluster < 1:
        raise TraceError("num_clusters and prompts_per_cluster must be >= 1")
    if skew < 0:
        raise TraceError("skew must be >= 0")
    p = params
    rng = np.random.default_rng(seed)
    Kmax = max(p.experts_per_layer)
    d = p.dim
    centroids = _unit(rng.normal(size=(num_clusters, d)))
    projections = rng.normal(size=(p.num_layers, Kmax, d))
    prefs = np.zeros((num_clusters, p.num_layers, Kmax))
    for c in range(num_clusters):
        for l, K in enumerate(p.experts_per_layer):
            prefs[c, l, :K] = 1.0 / K if skew == 0 else rng.dirichlet(np.full(K, 1.0 / skew))
    # guard against exact zeros so log-tilting stays finite
    prefs = np.where(prefs > 0, np.maximum(prefs, 1e-12), 0.0)

    out = []
    for c in range(num_clusters):
        for j in range(prompts_per_cluster):
            pid = f"c{c}-p{j}"
            offset = p.prompt_spread * rng.normal(size=d) / np.sqrt(d)
            direction = _unit(centroids[c] + offset)
            n_tok = int(rng.integers(p.min_tokens, p.max_tokens + 1))
            tokens = _unit(direction + p.token_spread * rng.normal(size=(n_tok, d)) / np.sqrt(d))
            pref = np.zeros((p.num_layers, Kmax))
            for l, K in enumerate(p.experts_per_layer):
                logits = np.log(prefs[c, l, :K]) + skew * p.semantic_gain * (projections[l, :K] @ offset)
                w = np.exp(logits - logits.max())
                pref[l, :K] = w / w.sum()
            trace = sample_routing(pref, n_tok, p.top_k, int(rng.integers(2**31)), n_out=p.n_out,
                                   experts_per_layer=p.experts_per_layer, prompt_id=pid)
            out.append((Prompt(pid, tokens, cluster=c), trace))
    return out


# --------------------------------------------------------------------------
# interchange formats

TRACE_CSV_HEADER = ("prompt_id", "phase", "token_index", "layer", "expert")


def write_traces_csv(path, traces: Iterable[RoutingTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_CSV_HEADER)
        for tr in traces:
            for phase, arr in (("prefill", tr.prefill), ("decode", tr.decode)):
                for l in range(arr.shape[0]):
                    for i in range(arr.shape[1]):
                        for e in arr[l, i]:
                            w.writerow((tr.prompt_id, phase, i, l, int(e)))


def read_traces_csv(path, experts_per_layer: Sequence[int], top_k: int) -> list[RoutingTrace]:
    L = len(experts_per_layer)
    rows: dict[str, dict[str, dict[tuple[int, int], list[int]]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_CSV_HEADER:
            raise TraceError(f"{path}: expected header {','.join(TRACE_CSV_HEADER)}")
        for r in reader:
            pid = r["prompt_id"]
            if pid not in rows:
                rows[pid] = {"prefill": {}, "decode": {}}
                order.append(pid)
            rows[pid][r["phase"]].setdefault((int(r["layer"]), int(r["token_index"])), []).append(int(r["expert"]))
    traces = []
    for pid in order:
        arrays = {}
        for phase, cells in rows[pid].items():
            n = 1 + max((i for (_, i) in cells), default=-1)
            lists = [[cells.get((l, i), []) for i in range(n)] for l in range(L)]
            if any(len(x) != top_k for layer in lists for x in layer):
                raise TraceError(f"trace {pid} {phase}: every token must be assigned exactly top_k={top_k} experts")
            arrays[phase] = np.array(lists, dtype=np.int64).reshape(L, n, top_k)
        traces.append(RoutingTrace(pid, arrays["prefill"], arrays["decode"], experts_per_layer, top_k))
    return traces


def save_trace_cache(path, traces: Sequence[RoutingTrace]) -> None:
    """Compact binary cache (npz) of routing traces."""
    payload = {}
    for j, tr in enumerate(traces):
        payload[f"pre_{j}"] = tr.prefill.astype(np.int16)
        payload[f"dec_{j}"] = tr.decode.astype(np.int16)
    payload["ids"] = np.array([t.prompt_id for t in traces])
    if traces:
        payload["experts_per_layer"] = np.array(traces[0].experts_per_layer)
        payload["top_k"] = np.array(traces[0].top_k)
    np.savez_compressed(path, **payload)


def load_trace_cache(path) -> list[RoutingTrace]:
    with np.load(path) as z:
        ids = [str(x) for x in z["ids"]]
        if not ids:
            return []
        K = tuple(int(k) for k in z["experts_per_layer"])
        top_k = int(z["top_k"])
        return [RoutingTrace(pid, z[f"pre_{j}"].astype(np.int64), z[f"dec_{j}"].astype(np.int64), K, top_k)
                for j, pid in enumerate(ids)]


@dataclass
class Corpus:
    prompts: list[Prompt]
    traces: list[RoutingTrace]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(zip(self.prompts, self.traces))


def save_corpus(directory, corpus: Corpus) -> list[Path]:
    """Write manifest JSON, trace CSV, trace cache and embeddings under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"traces_csv": "traces.csv", "trace_cache": "traces.npz", "embeddings": "embeddings.npz"}
    write_traces_csv(d / files["traces_csv"], corpus.traces)
    save_trace_cache(d / files["trace_cache"], corpus.traces)
    np.savez_compressed(d / files["embeddings"], **{f"e_{j}": p.embeddings for j, p in enumerate(corpus.prompts)})
    manifest = {
        "version": CORPUS_VERSION,
        "meta": corpus.meta,
        "files": files,
        "prompts": [{"id": p.id, "cluster": p.cluster, "token_count": p.token_count} for p in corpus.prompts],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return [d / "manifest.json"] + [d / f for f in files.values()]


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise TraceError(f"{d}: unsupported corpus version {manifest.get('version')}")
    traces = load_trace_cache(d / manifest["files"]["trace_cache"])
    with np.load(d / manifest["files"]["embeddings"]) as z:
        prompts = [Prompt(m["id"], z[f"e_{j}"], m["cluster"]) for j, m in enumerate(manifest["prompts"])]
    if [p.id for p in prompts] != [t.prompt_id for t in traces]:
        raise TraceError(f"{d}: prompt and trace ids disagree")
    return Corpus(prompts, traces, manifest.get("meta", {}))
