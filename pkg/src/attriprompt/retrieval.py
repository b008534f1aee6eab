"""Attribute retrieval: cluster vision tokens, score them against pool keys, pick prompts.

For each text layer the mapped vision layer's patch tokens are clustered into
``k`` attribute centroids. Each centroid scores every pool key with a softmax
over cosine similarities, and a greedy global assignment picks ``k`` distinct
prompts. Clustering always runs on detached values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import LayerFeatureTrace
from .errors import ConfigError, ContractError, DegenerateInputError

POOL_INIT_STD = 0.02


@dataclass
class PromptPool:
    prompts: Tensor  # [M, L_p, d_txt]
    keys: Tensor  # [M, d_vis]

    @classmethod
    def init(cls, size: int, prompt_len: int, d_txt: int, d_vis: int, seed: int) -> "PromptPool":
        if size < 1:
            raise ConfigError("prompt pool needs at least one prompt")
        rng = np.random.default_rng([seed, 1])
        prompts = rng.normal(0.0, POOL_INIT_STD, size=(size, prompt_len, d_txt))
        keys = rng.normal(0.0, POOL_INIT_STD, size=(size, d_vis))
        # a zero key row would make its cosine undefined
        for i in np.flatnonzero(np.linalg.norm(keys, axis=1) == 0.0):
            keys[i] = np.full(d_vis, POOL_INIT_STD / np.sqrt(d_vis))
        return cls(Tensor(prompts, requires_grad=True, name="pool.prompts"), Tensor(keys, requires_grad=True, name="pool.keys"))

    @property
    def size(self) -> int:
        return self.prompts.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.shape[1]


@dataclass
class AttributeSet:
    centroids: np.ndarray  # [k, d]
    assignment: np.ndarray  # [N] cluster id per patch token
    sse: float
    sse_history: list[float] = field(default_factory=list)
    iterations: int = 0


@dataclass
class LayerSelection:
    vision_layer: int
    attributes: Optional[AttributeSet]
    scores: np.ndarray  # [k, M]
    indices: list[int]


@dataclass
class RetrievalPlan:
    per_layer: list[LayerSelection]

    @classmethod
    def empty(cls, n_layers: int) -> "RetrievalPlan":
        """A plan that injects nothing at any layer."""
        return cls([LayerSelection(-1, None, np.zeros((0, 0)), []) for _ in range(n_layers)])


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)


def kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> AttributeSet:
    """Lloyd's algorithm with deterministic seeding.

    Initial centroids are the first ``k`` distinct points in a seed-derived
    permutation (duplicates fill in when fewer are distinct). Stops early once
    assignments repeat. An empty cluster is re-seeded at the point farthest
    from its nearest centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"cannot form {k} clusters from {n} points")
    if iters < 1:
        raise ConfigError("k-means needs at least one iteration")
    order = np.random.default_rng(seed).permutation(n)
    chosen: list[int] = []
    for i in order:
        if not any(np.array_equal(pts[i], pts[j]) for j in chosen):
            chosen.append(int(i))
        if len(chosen) == k:
            break
    for i in order:
        if len(chosen) == k:
            break
        if int(i) not in chosen:
            chosen.append(int(i))
    centroids = pts[chosen].copy()

    assignment = None
    history: list[float] = []
    for _ in range(iters):
        new_assignment = np.argmin(_sq_dists(pts, centroids), axis=1)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = pts[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        for j in range(k):
            if not np.any(assignment == j):
                nearest = _sq_dists(pts, centroids).min(axis=1)
                centroids[j] = pts[int(np.argmax(nearest))]
        diff = pts - centroids[assignment]
        history.append(float((diff * diff).sum()))
    return AttributeSet(centroids, assignment, history[-1], history, len(history))


def cluster_attributes(layer_tokens, k: int, iters: int, seed: int) -> AttributeSet:
    """Cluster one layer's patch tokens (row 0, the class token, is excluded)."""
    tokens = np.asarray(layer_tokens.data if isinstance(layer_tokens, Tensor) else layer_tokens, dtype=np.float64)
    patches = tokens[1:]
    if k > patches.shape[0]:
        raise ConfigError(f"k={k} exceeds the number of patch tokens ({patches.shape[0]})")
    return kmeans(patches, k, iters, seed)


def retrieval_scores(attributes: AttributeSet | np.ndarray, pool: PromptPool) -> np.ndarray:
    """Row-wise softmax over cos(centroid_i, key_j); returns a detached [k, M] array."""
    centroids = attributes.centroids if isinstance(attributes, AttributeSet) else np.asarray(attributes)
    with ad.no_grad():
        try:
            cos = ad.cosine_rows(Tensor(centroids), pool.keys)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"retrieval on a degenerate centroid or key: {exc}") from None
        return ad.softmax_rows(cos).data


def select_unique(scores) -> list[int]:
    """Greedy global assignment of distinct keys to attributes.

    Pairs are visited by descending score, ties broken by lower attribute
    index then lower key index; a pair is taken when both sides are free.
    Position i of the result is the key chosen for attribute i.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    k, m = s.shape
    if m < k:
        raise ContractError(f"cannot pick {k} distinct prompts from a pool of {m}")
    flat = s.reshape(-1)
    # lexsort: last key is primary
    order = np.lexsort((np.tile(np.arange(m), k), np.repeat(np.arange(k), m), -flat))
    picked = [-1] * k
    used_keys: set[int] = set()
    remaining = k
    for pos in order:
        i, j = divmod(int(pos), m)
        if picked[i] >= 0 or j in used_keys:
            continue
        picked[i] = j
        used_keys.add(j)
        remaining -= 1
        if remaining == 0:
            break
    return picked


def cluster_trace(trace: LayerFeatureTrace, k: int, iters: int, mapping: Sequence[int], seed: int) -> list[AttributeSet]:
    """Attribute sets for each text layer, in text-layer order. Depends only on the image."""
    missing = [l for l in mapping if l >= len(trace.per_layer)]
    if missing:
        raise ContractError(f"trace has {len(trace.per_layer)} layers; plan needs vision layers {missing}")
    cache: dict[int, AttributeSet] = {}
    out = []
    for l in mapping:
        if l not in cache:
            cache[l] = cluster_attributes(trace.per_layer[l], k, iters, seed)
        out.append(cache[l])
    return out


def plan_from_attributes(attributes: Sequence[AttributeSet], mapping: Sequence[int], pool: PromptPool) -> RetrievalPlan:
    layers = []
    for l, attrs in zip(mapping, attributes):
        scores = retrieval_scores(attrs, pool)
        layers.append(LayerSelection(int(l), attrs, scores, select_unique(scores)))
    return RetrievalPlan(layers)


def build_plan(trace: LayerFeatureTrace, pool: PromptPool, k: int, iters: int, mapping: Sequence[int], seed: int) -> RetrievalPlan:
    return plan_from_attributes(cluster_trace(trace, k, iters, mapping, seed), mapping, pool)


def match_loss(plan: RetrievalPlan, pool: PromptPool) -> Tensor:
    """Sum over layers and selected pairs of cos(centroid_i, key_selected(i)).

    Centroids enter as constants, so only the keys receive gradient.
    """
    total: Optional[Tensor] = None
    for layer in plan.per_layer:
        if not layer.indices:
            continue
        cos = ad.cosine_pairs(Tensor(layer.attributes.centroids), ad.take_rows(pool.keys, layer.indices))
        term = ad.tsum(cos)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


def diversity_loss(pool: PromptPool) -> Tensor:
    """(1 / (M(M-1))) * sum over i<j of cos(flat p_i, flat p_j); zero for a single prompt."""
    M = pool.size
    if M < 2:
        return Tensor(0.0)
    flat = ad.reshape(pool.prompts, (M, -1))
    cos = ad.cosine_rows(flat, flat)
    upper = Tensor(np.triu(np.ones((M, M)), k=1))
    return ad.scale(ad.tsum(ad.mul(cos, upper)), 1.0 / (M * (M - 1)))
