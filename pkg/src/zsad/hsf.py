"""Hybrid semantic fusion: image scores from the most abnormal patch cluster.

Patch embeddings of each hierarchy layer are clustered with KMeans++/Lloyd,
clusters are ranked by their mean patch anomaly score, and the centroid of the
winner is projected and added to the global image embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ConfigError, InputError, UsageError
from .numerics import cosine_similarity, softmax_pair

# Relative slack for the Lloyd inertia check; absorbs summation-order rounding.
INERTIA_RTOL = 1e-12


@dataclass(frozen=True)
class HSFConfig:
    clusters: int = 20
    seed: int = 0
    max_iter: int = 50
    variant: str = "top1"  # or "legacy"
    score_source: str = "aggregated"  # or "per_layer"
    legacy_topk: int = 16
    legacy_clusters: int = 4

    def __post_init__(self) -> None:
        if self.clusters < 1 or self.max_iter < 1:
            raise ConfigError("clusters and max_iter must be >= 1")
        if self.variant not in ("top1", "legacy"):
            raise ConfigError(f"unknown hsf variant {self.variant!r}")
        if self.score_source not in ("aggregated", "per_layer"):
            raise ConfigError(f"unknown hsf score source {self.score_source!r}")


@dataclass
class Clustering:
    assignments: np.ndarray  # (N,) int
    centroids: np.ndarray  # (K, d)
    inertia: float
    inertia_history: list[float]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every point coincides with a centre: take the first unused index
            used = set(chosen)
            nxt = next(i for i in range(n) if i not in used)
        else:
            u = rng.random() * total
            nxt = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def kmeans_pp(rows, k: int, seed: int = 0, max_iter: int = 50) -> Clustering:
    """KMeans++ seeding followed by Lloyd iterations.

    Rows are sorted lexicographically before seeding so the result does not
    depend on input order; assignments are reported in the caller's order.
    Runs until the assignment stops changing or ``max_iter`` is reached. An
    emptied cluster is re-seeded at the point farthest from its centroid.
    """
    x_in = np.asarray(rows.detach().cpu().numpy() if isinstance(rows, torch.Tensor) else rows, dtype=np.float64)
    if x_in.ndim != 2:
        raise UsageError("kmeans_pp expects a 2-D array of rows")
    n = x_in.shape[0]
    if k < 1 or k > n:
        raise InputError(f"cluster count {k} must lie in [1, {n}]")
    if max_iter < 1:
        raise InputError("max_iter must be >= 1")

    order = np.lexsort(x_in.T[::-1])
    x = x_in[order]
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_labels].sum())
        _check_monotone(history, inertia)
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _update(x, labels, centroids, k)
        if _has_empty(labels, k):
            labels, centroids = _reseed_empty(x, labels, centroids, k)

    d2 = _sq_dists(x, centroids)
    final = d2.argmin(axis=1)
    if labels is None or not np.array_equal(final, labels):
        labels = final
        centroids = _update(x, labels, centroids, k)
        if _has_empty(labels, k):
            labels, centroids = _reseed_empty(x, labels, centroids, k)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    _check_monotone(history, inertia)
    history.append(inertia)

    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = labels
    return Clustering(assignments, centroids, inertia, history)


def _check_monotone(history: list[float], value: float) -> None:
    if history and value > history[-1] * (1 + INERTIA_RTOL) + 1e-300:
        raise AssertionError(f"Lloyd inertia increased: {history[-1]!r} -> {value!r}")


def _update(x: np.ndarray, labels: np.ndarray, old: np.ndarray, k: int) -> np.ndarray:
    out = old.copy()
    for j in range(k):
        members = labels == j
        if members.any():
            out[j] = x[members].mean(axis=0)
    return out


def _has_empty(labels: np.ndarray, k: int) -> bool:
    return np.bincount(labels, minlength=k).min() == 0


def _reseed_empty(x, labels, centroids, k):
    labels = labels.copy()
    centroids = centroids.copy()
    for j in range(k):
        if (labels == j).any():
            continue
        counts = np.bincount(labels, minlength=k)
        d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
        d2[counts[labels] <= 1] = -1.0  # never strip a singleton
        far = int(d2.argmax())
        old = labels[far]
        labels[far] = j
        centroids[j] = x[far]
        members = labels == old
        centroids[old] = x[members].mean(axis=0)
    return labels, centroids


def cluster_scores(clustering: Clustering, patch_scores) -> np.ndarray:
    """Mean patch score of each cluster."""
    s = np.asarray(patch_scores.detach().cpu().numpy() if isinstance(patch_scores, torch.Tensor) else patch_scores,
                   dtype=np.float64)
    if s.shape != clustering.assignments.shape:
        raise UsageError(f"{s.shape[0]} scores for {clustering.assignments.shape[0]} patches")
    k = clustering.k
    sums = np.bincount(clustering.assignments, weights=s, minlength=k)
    counts = np.bincount(clustering.assignments, minlength=k)
    return sums / counts


def _top_cluster_centroid(embeds: torch.Tensor, scores, k: int, seed: int, max_iter: int) -> torch.Tensor:
    cl = kmeans_pp(embeds, k, seed, max_iter)
    per_cluster = cluster_scores(cl, scores)
    best = int(np.argmax(per_cluster))  # first maximum = lowest id on ties
    members = torch.as_tensor(np.flatnonzero(cl.assignments == best))
    return embeds[members].mean(dim=0)


def _legacy_centroid(embeds: torch.Tensor, scores, topk: int, n_clusters: int, seed: int, max_iter: int):
    s = torch.as_tensor(np.asarray(scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else scores))
    topk = min(topk, embeds.shape[0])
    # stable descending order: ties keep the lower patch index
    idx = torch.as_tensor(np.argsort(-s.numpy(), kind="stable")[:topk])
    selected = embeds[idx]
    cl = kmeans_pp(selected, min(n_clusters, topk), seed, max_iter)
    cents = [selected[torch.as_tensor(np.flatnonzero(cl.assignments == j))].mean(dim=0) for j in range(cl.k)]
    return torch.stack(cents).mean(dim=0)


def semantic_embedding(
    per_layer_embeds: Mapping[int, torch.Tensor],
    per_layer_scores: Mapping[int, torch.Tensor],
    F_I: torch.Tensor,
    proj: Callable[[torch.Tensor], torch.Tensor] | Mapping[int, Callable[[torch.Tensor], torch.Tensor]],
    cfg: HSFConfig = HSFConfig(),
) -> torch.Tensor:
    """Global embedding plus the projected most-abnormal centroid of every layer.

    ``per_layer_scores`` maps each layer to the per-patch scores used to rank
    clusters (the caller decides whether that is the layer's own map or the
    aggregated one). ``proj`` is one projection or one per layer. The cluster
    count is clamped to the patch count. Gradients flow through the centroid
    means; cluster membership itself is treated as constant.
    """
    if set(per_layer_embeds) != set(per_layer_scores):
        raise UsageError("embeddings and scores cover different layers")
    fused = F_I
    for layer in sorted(per_layer_embeds):
        e = per_layer_embeds[layer]
        s = per_layer_scores[layer]
        if cfg.variant == "top1":
            c = _top_cluster_centroid(e, s, min(cfg.clusters, e.shape[0]), cfg.seed, cfg.max_iter)
        else:
            c = _legacy_centroid(e, s, cfg.legacy_topk, cfg.legacy_clusters, cfg.seed, cfg.max_iter)
        p = proj[layer] if isinstance(proj, Mapping) else proj
        fused = fused + p(c)
    return fused


def image_score(F_sem: torch.Tensor, F_T_N: torch.Tensor, F_T_A: torch.Tensor, temperature: float = 1.0):
    """Abnormal probability of the fused image embedding."""
    a = cosine_similarity(F_sem, F_T_A)
    n = cosine_similarity(F_sem, F_T_N)
    abnormal, _ = softmax_pair(a / temperature, n / temperature)
    return abnormal


def max_score_baseline(aggregated_map) -> float:
    m = aggregated_map.detach() if isinstance(aggregated_map, torch.Tensor) else torch.as_tensor(aggregated_map)
    if m.numel() == 0:
        raise UsageError("max_score_baseline needs a nonempty map")
    return float(m.max())
