"""Expert-activation prediction from semantically similar historical prompts.

Similarity between prompts is the soft cosine over their concatenated,
normalized token embeddings. Because the token similarity matrix is a Gram
matrix and the alignment vectors are 0/1 ownership masks, every quadratic
form collapses to a dot product of per-prompt embedding sums; the search
code uses that identity, the public :func:`soft_cosine` shows the full form.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import rel_entr, softmax

from .workload import Prompt, TraceError, uniform_activation, validate_activation

TREE_VERSION = 1
DEFAULT_SIGMA = 1e-8


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityKernel:
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not (0 < self.sigma <= 1e-6):
            raise PredictionError("sigma must lie in (0, 1e-6]")


@dataclass(frozen=True, eq=False)
class HistoricalRecord:
    prompt: Prompt
    activation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "activation", validate_activation(self.activation))


def soft_cosine(p1: Prompt, p2: Prompt, kernel: SimilarityKernel = SimilarityKernel()) -> float:
    """Soft cosine similarity of two prompts.

    Builds the Gram matrix of both prompts' stacked token embeddings and the
    two 0/1 ownership vectors, then evaluates ``v1' C v2 / (sqrt(v1' C v1) *
    sqrt(v2' C v2) + sigma)``.
    """
    if p1.dim != p2.dim:
        raise PredictionError(f"embedding dimension mismatch: {p1.dim} vs {p2.dim}")
    tokens = np.vstack([p1.embeddings, p2.embeddings])
    gram = tokens @ tokens.T
    v1 = np.r_[np.ones(p1.token_count), np.zeros(p2.token_count)]
    v2 = np.r_[np.zeros(p1.token_count), np.ones(p2.token_count)]
    num = v1 @ gram @ v2
    den = np.sqrt(max(v1 @ gram @ v1, 0.0)) * np.sqrt(max(v2 @ gram @ v2, 0.0)) + kernel.sigma
    return float(num / den)


def _scs_block(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    """Soft cosine between rows of two summary matrices."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a @ b.T) / (np.multiply.outer(na, nb) + sigma)


# --------------------------------------------------------------------------
# clustering tree

@dataclass
class TreeNode:
    medoid: int | None
    children: list[int] = field(default_factory=list)
    members: list[int] = field(default_factory=list)
    parent: int | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(eq=False)
class ClusterTree:
    history: list[HistoricalRecord]
    nodes: list[TreeNode]
    alpha: int
    beta: int
    branching: int
    seed: int
    sigma: float = DEFAULT_SIGMA
    build_seconds: float = 0.0

    def __post_init__(self):
        self.summaries = np.array([r.prompt.summary for r in self.history])
        self.ids = [r.prompt.id for r in self.history]

    @property
    def leaves(self) -> list[int]:
        return [j for j, n in enumerate(self.nodes) if n.is_leaf]

    def subtree_members(self, node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            n = self.nodes[stack.pop()]
            if n.is_leaf:
                out.extend(n.members)
            else:
                stack.extend(reversed(n.children))
        return out


def _distance(sim: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - sim, 0.0, 2.0)


def _exact_medoid(idx: np.ndarray, summaries: np.ndarray, sigma: float, chunk: int = 512) -> int:
    """Member minimising the summed distance to all other members."""
    X = summaries[idx]
    total = np.empty(len(idx))
    for s in range(0, len(idx), chunk):
        total[s:s + chunk] = _distance(_scs_block(X[s:s + chunk], X, sigma)).sum(axis=1)
    return int(idx[int(np.argmin(total))])


def _kmedoids(idx: np.ndarray, summaries: np.ndarray, k: int, rng: np.random.Generator,
              sigma: float, max_iter: int = 20) -> list[np.ndarray]:
    X = summaries[idx]
    n = len(idx)
    # roulette-wheel seeding on squared distance mass
    chosen = [int(rng.integers(n))]
    nearest = _distance(_scs_block(X, X[chosen], sigma))[:, 0]
    while len(chosen) < min(k, n):
        mass = nearest ** 2
        mass[chosen] = 0.0
        if mass.sum() <= 0:
            free = np.setdiff1d(np.arange(n), chosen)
            pick = int(rng.choice(free))
        else:
            pick = int(rng.choice(n, p=mass / mass.sum()))
        chosen.append(pick)
        nearest = np.minimum(nearest, _distance(_scs_block(X, X[[pick]], sigma))[:, 0])
    medoids = np.array(chosen)
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = _distance(_scs_block(X, X[medoids], sigma))
        labels = np.argmin(dist, axis=1)
        new = medoids.copy()
        for c in range(len(medoids)):
            members = np.flatnonzero(labels == c)
            if members.size:
                new[c] = np.flatnonzero(idx == _exact_medoid(idx[members], summaries, sigma))[0]
        if np.array_equal(np.sort(new), np.sort(medoids)):
            medoids = new
            break
        medoids = new
    dist = _distance(_scs_block(X, X[medoids], sigma))
    labels = np.argmin(dist, axis=1)
    return [idx[labels == c] for c in range(len(medoids)) if np.any(labels == c)]


def build_tree(history: Sequence[HistoricalRecord], alpha: int, beta: int, branching: int = 4,
               seed: int = 0, kernel: SimilarityKernel = SimilarityKernel()) -> ClusterTree:
    """Recursively split any node holding more than ``beta`` prompts with k-medoids."""
    if not history:
        raise PredictionError("history must be non-empty")
    if not (beta > alpha >= 1):
        raise PredictionError(f"need beta > alpha >= 1 (got alpha={alpha}, beta={beta})")
    if branching < 2:
        raise PredictionError("branching must be >= 2")
    t0 = time.perf_counter()
    tree = ClusterTree(list(history), [], alpha, beta, branching, seed, kernel.sigma)
    S = tree.summaries
    everyone = np.arange(len(history))
    tree.nodes.append(TreeNode(medoid=_exact_medoid(everyone, S, kernel.sigma), members=everyone.tolist()))
    queue = [0]
    while queue:
        j = queue.pop(0)
        node = tree.nodes[j]
        if len(node.members) <= beta:
            continue
        idx = np.array(node.members)
        rng = np.random.default_rng([seed, j])
        groups = _kmedoids(idx, S, branching, rng, kernel.sigma)
        if len(groups) < 2:
            # degenerate geometry (e.g. duplicate prompts): split evenly
            groups = np.array_split(idx, branching)
        node.members = []
        for g in groups:
            child = TreeNode(medoid=_exact_medoid(g, S, kernel.sigma), members=g.tolist(), parent=j)
            node.children.append(len(tree.nodes))
            queue.append(len(tree.nodes))
            tree.nodes.append(child)
    tree.build_seconds = time.perf_counter() - t0
    return tree


@dataclass
class SearchResult:
    ids: list[str]
    indices: list[int]
    scores: list[float]
    evaluations: int


def sps_search(tree: ClusterTree, prompt: Prompt, alpha: int) -> SearchResult:
    """Similar-prompt search: descend to a leaf, widen through siblings if short, keep top alpha."""
    n = len(tree.history)
    if alpha > n:
        raise PredictionError(f"alpha={alpha} exceeds history size {n}")
    if alpha < 1:
        raise PredictionError("alpha must be >= 1")
    q = prompt.summary[None, :]
    cache: dict[int, float] = {}

    def scs(indices: Sequence[int]) -> np.ndarray:
        todo = [i for i in indices if i not in cache]
        if todo:
            vals = _scs_block(q, tree.summaries[todo], tree.sigma)[0]
            cache.update(zip(todo, vals.tolist()))
        return np.array([cache[i] for i in indices])

    path: list[tuple[int, list[int]]] = []   # (chosen child, siblings ranked by medoid similarity)
    node = 0
    while not tree.nodes[node].is_leaf:
        kids = tree.nodes[node].children
        sims = scs([tree.nodes[c].medoid for c in kids])
        ranked = [kids[i] for i in np.argsort(-sims, kind="stable")]
        path.append((ranked[0], ranked[1:]))
        node = ranked[0]

    candidates = list(tree.nodes[node].members)
    for _, siblings in reversed(path):
        if len(candidates) >= alpha:
            break
        for sib in siblings:
            candidates.extend(tree.subtree_members(sib))
            if len(candidates) >= alpha:
                break

    sims = scs(candidates)
    order = np.lexsort((np.array(candidates), -sims))[:alpha]
    top = [candidates[i] for i in order]
    return SearchResult([tree.ids[i] for i in top], top, [float(sims[i]) for i in order], len(cache))


def brute_force_search(history: Sequence[HistoricalRecord], prompt: Prompt, alpha: int,
                       kernel: SimilarityKernel = SimilarityKernel()) -> SearchResult:
    if alpha > len(history):
        raise PredictionError(f"alpha={alpha} exceeds history size {len(history)}")
    S = np.array([r.prompt.summary for r in history])
    sims = _scs_block(prompt.summary[None, :], S, kernel.sigma)[0]
    order = np.lexsort((np.arange(len(history)), -sims))[:alpha]
    return SearchResult([history[i].prompt.id for i in order], order.tolist(),
                        sims[order].tolist(), len(history))


def predict_activation(neighbors: Iterable[tuple[HistoricalRecord | np.ndarray, float]]) -> np.ndarray:
    """Softmax-weighted sum of neighbour activation matrices (weights from raw similarities)."""
    pairs = list(neighbors)
    if not pairs:
        raise PredictionError("neighbor list is empty")
    mats = np.array([r.activation if isinstance(r, HistoricalRecord) else np.asarray(r, float)
                     for r, _ in pairs])
    w = softmax(np.array([s for _, s in pairs], dtype=float))
    return np.tensordot(w, mats, axes=1)


def predict_with_tree(tree: ClusterTree, prompt: Prompt, alpha: int) -> tuple[np.ndarray, SearchResult]:
    res = sps_search(tree, prompt, alpha)
    pred = predict_activation((tree.history[i], s) for i, s in zip(res.indices, res.scores))
    return pred, res


def js_divergence(a, b) -> float:
    """Mean over layers of the base-2 Jensen-Shannon divergence between rows."""
    try:
        a = validate_activation(a)
        b = validate_activation(b)
    except TraceError as exc:
        raise PredictionError(str(exc)) from None
    if a.shape != b.shape:
        raise PredictionError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = 0.5 * (a + b)
    js = 0.5 * (rel_entr(a, m).sum(axis=1) + rel_entr(b, m).sum(axis=1)) / np.log(2.0)
    return float(np.clip(js, 0.0, 1.0).mean())


def baseline_predict(kind: str, history: Sequence[HistoricalRecord], prompt: Prompt | None = None,
                     alpha: int = 15, kernel: SimilarityKernel = SimilarityKernel(),
                     experts_per_layer: Sequence[int] | None = None) -> np.ndarray:
    """EF (uniform), DOP (mean of all history) or BF (exact top-alpha then softmax weighting)."""
    kind = kind.upper()
    if not history:
        raise PredictionError("history must be non-empty")
    if kind == "EF":
        L, Kmax = history[0].activation.shape
        return uniform_activation(experts_per_layer or [Kmax] * L)
    if kind == "DOP":
        return np.mean([r.activation for r in history], axis=0)
    if kind == "BF":
        if prompt is None:
            raise PredictionError("BF needs a query prompt")
        res = brute_force_search(history, prompt, alpha, kernel)
        return predict_activation((history[i], s) for i, s in zip(res.indices, res.scores))
    raise PredictionError(f"unknown baseline {kind!r}; expected EF, DOP or BF")


# --------------------------------------------------------------------------
# serialisation

def save_tree(path, tree: ClusterTree) -> None:
    doc = {
        "version": TREE_VERSION,
        "alpha": tree.alpha, "beta": tree.beta, "branching": tree.branching, "seed": tree.seed,
        "sigma": tree.sigma,
        "ids": tree.ids,
        "nodes": [{"medoid": n.medoid, "children": n.children, "members": n.members, "parent": n.parent}
                  for n in tree.nodes],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_tree(path, history: Sequence[HistoricalRecord]) -> ClusterTree:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != TREE_VERSION:
        raise PredictionError(f"unsupported tree version {doc.get('version')}")
    if doc["ids"] != [r.prompt.id for r in history]:
        raise PredictionError("tree was built over a different history")
    nodes = [TreeNode(n["medoid"], list(n["children"]), list(n["members"]), n["parent"]) for n in doc["nodes"]]
    return ClusterTree(list(history), nodes, doc["alpha"], doc["beta"], doc["branching"], doc["seed"], doc["sigma"])


def write_prediction_report(path, rows: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("prompt_id", "method", "js_divergence"))
        for pid, method, js in rows:
            w.writerow((pid, method, f"{js:.10g}"))
