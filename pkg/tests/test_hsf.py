import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zsad.errors import ConfigError, InputError, UsageError
from zsad.hsf import (
    Clustering,
    HSFConfig,
    cluster_scores,
    image_score,
    kmeans_pp,
    max_score_baseline,
    semantic_embedding,
)
from zsad.localization import ProjectionLayer


def test_config_validation():
    with pytest.raises(ConfigError):
        HSFConfig(variant="nope")
    with pytest.raises(ConfigError):
        HSFConfig(score_source="nope")


def test_kmeans_degenerate(rng):
    x = rng.normal(size=(7, 3))
    one = kmeans_pp(x, 1)
    assert np.allclose(one.centroids[0], x.mean(axis=0), atol=1e-12)
    full = kmeans_pp(x, 7)
    assert full.inertia == 0.0 and sorted(full.assignments.tolist()) == list(range(7))
    with pytest.raises(InputError):
        kmeans_pp(x, 8)
    with pytest.raises(InputError):
        kmeans_pp(x, 0)


def _best_two_partition(x):
    # exhaustive oracle over all 2-partitions
    n = len(x)
    best, best_lab = np.inf, None
    for bits in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.min() == lab.max():
            continue
        cost = sum(((x[lab == j] - x[lab == j].mean(0)) ** 2).sum() for j in (0, 1))
        if cost < best:
            best, best_lab = cost, lab
    return best, best_lab


def test_kmeans_separated_blobs_match_brute_force():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n1 = int(rng.integers(3, 9))
        x = np.vstack([rng.normal(0, 0.1, size=(n1, 2)), rng.normal(10, 0.1, size=(12 - n1, 2))])
        cl = kmeans_pp(x, 2, seed=seed)
        best, lab = _best_two_partition(x)
        same = (cl.assignments == cl.assignments[0]) == (lab == lab[0])
        assert same.all()
        assert cl.inertia == pytest.approx(best, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(1, 8))
def test_kmeans_invariants(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    if seed % 3 == 0:
        x[: n // 2] = x[0]  # duplicated rows exercise empty-cluster handling
    cl = kmeans_pp(x, k, seed=seed)
    assert cl.assignments.min() >= 0 and cl.assignments.max() < k
    assert np.bincount(cl.assignments, minlength=k).min() >= 1 or len(np.unique(x, axis=0)) < k
    for j in range(k):
        members = x[cl.assignments == j]
        if len(members):
            assert np.allclose(cl.centroids[j], members.mean(axis=0), atol=1e-9)
    h = cl.inertia_history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))
    again = kmeans_pp(x, k, seed=seed)
    assert np.array_equal(cl.assignments, again.assignments)


def test_kmeans_permutation_invariant(rng):
    x = rng.normal(size=(20, 4))
    perm = rng.permutation(20)
    a = kmeans_pp(x, 5, seed=3)
    b = kmeans_pp(x[perm], 5, seed=3)
    assert np.array_equal(a.assignments[perm], b.assignments)


def test_cluster_scores():
    cl = Clustering(np.array([0, 0, 1, 1, 1]), np.zeros((2, 1)), 0.0, [])
    assert np.allclose(cluster_scores(cl, np.full(5, 0.3)), 0.3)
    cl2 = Clustering(np.array([0, 0, 1]), np.zeros((2, 1)), 0.0, [])
    assert cluster_scores(cl2, np.array([0.2, 0.4, 0.9]))[0] == pytest.approx(0.3)
    relabeled = Clustering(np.array([1, 1, 0]), np.zeros((2, 1)), 0.0, [])
    assert np.allclose(cluster_scores(relabeled, [0.2, 0.4, 0.9])[::-1], cluster_scores(cl2, [0.2, 0.4, 0.9]))
    with pytest.raises(UsageError):
        cluster_scores(cl2, np.ones(4))


def _setup(rng, layers=(2, 3), n=16, d=6):
    embeds = {j: torch.as_tensor(rng.normal(size=(n, d))) for j in layers}
    scores = {j: torch.as_tensor(rng.random(n)) for j in layers}
    proj = ProjectionLayer(d, 5, seed=0)
    f_i = torch.as_tensor(rng.normal(size=5))
    return embeds, scores, proj, f_i


def test_semantic_embedding_k1(rng):
    embeds, scores, proj, f_i = _setup(rng)
    out = semantic_embedding(embeds, scores, f_i, proj, HSFConfig(clusters=1))
    expect = f_i + sum(proj(e.mean(0)) for e in embeds.values())
    assert torch.allclose(out, expect, atol=1e-12)


def test_semantic_embedding_identical_patches(rng):
    v = torch.as_tensor(rng.normal(size=6))
    proj = ProjectionLayer(6, 5)
    f_i = torch.as_tensor(rng.normal(size=5))
    out = semantic_embedding({2: v.expand(16, 6).clone()}, {2: torch.rand(16, dtype=torch.float64)}, f_i, proj)
    assert torch.allclose(out, f_i + proj(v), atol=1e-12)


def test_semantic_embedding_zero_projection(rng):
    embeds, scores, proj, f_i = _setup(rng)
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.zero_()
    assert torch.equal(semantic_embedding(embeds, scores, f_i, proj), f_i)


def test_semantic_embedding_picks_top_cluster():
    # two clear groups; the high-score group's mean must be fused
    e = torch.tensor([[0.0, 0.0]] * 4 + [[10.0, 10.0]] * 4, dtype=torch.float64) + 0.01 * torch.arange(8.0).unsqueeze(1)
    s = torch.tensor([0.1] * 4 + [0.9] * 4, dtype=torch.float64)
    ident = lambda x: x  # noqa: E731
    out = semantic_embedding({1: e}, {1: s}, torch.zeros(2, dtype=torch.float64), ident, HSFConfig(clusters=2))
    assert torch.allclose(out, e[4:].mean(0), atol=1e-12)


def test_semantic_embedding_ties_and_permutation(rng):
    embeds, scores, proj, f_i = _setup(rng, layers=(2,))
    flat = {2: torch.full((16,), 0.5, dtype=torch.float64)}
    out = semantic_embedding(embeds, flat, f_i, proj, HSFConfig(clusters=4))
    assert torch.isfinite(out).all()
    perm = torch.as_tensor(rng.permutation(16))
    a = semantic_embedding(embeds, scores, f_i, proj, HSFConfig(clusters=4))
    b = semantic_embedding({2: embeds[2][perm]}, {2: scores[2][perm]}, f_i, proj, HSFConfig(clusters=4))
    assert torch.allclose(a, b, atol=1e-12)


def test_semantic_embedding_clamps_k_and_legacy(rng):
    embeds, scores, proj, f_i = _setup(rng, n=4)
    out = semantic_embedding(embeds, scores, f_i, proj, HSFConfig(clusters=20))
    assert out.shape == (5,)
    leg = semantic_embedding(embeds, scores, f_i, proj, HSFConfig(variant="legacy", legacy_topk=3, legacy_clusters=2))
    assert leg.shape == (5,)
    with pytest.raises(UsageError):
        semantic_embedding(embeds, {2: scores[2]}, f_i, proj)


def test_legacy_equals_hand_computation():
    e = torch.tensor([[0.0], [1.0], [10.0], [11.0], [50.0]], dtype=torch.float64)
    s = torch.tensor([0.9, 0.8, 0.7, 0.6, 0.0], dtype=torch.float64)
    ident = lambda x: x  # noqa: E731
    cfg = HSFConfig(variant="legacy", legacy_topk=4, legacy_clusters=2)
    out = semantic_embedding({1: e}, {1: s}, torch.zeros(1, dtype=torch.float64), ident, cfg)
    assert float(out) == pytest.approx((0.5 + 10.5) / 2, abs=1e-12)


def test_semantic_embedding_gradient_flows(rng):
    embeds, scores, proj, f_i = _setup(rng)
    out = semantic_embedding(embeds, scores, f_i, proj, HSFConfig(clusters=3))
    out.sum().backward()
    assert float(proj.weight.grad.abs().sum()) > 0


def test_image_score():
    t_n = torch.tensor([1.0, 0.0], dtype=torch.float64)
    t_a = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert float(image_score(torch.tensor([1.0, 1.0], dtype=torch.float64), t_n, t_a)) == pytest.approx(0.5, abs=1e-15)
    assert float(image_score(torch.tensor([-1.0, 0.0], dtype=torch.float64), t_n, -t_n)) == pytest.approx(0.880797, abs=1e-6)
    f = torch.tensor([0.3, -2.0], dtype=torch.float64)
    assert float(image_score(f, t_n, t_a)) + float(image_score(f, t_a, t_n)) == pytest.approx(1.0, abs=1e-15)


def test_max_score_baseline(rng):
    assert max_score_baseline(torch.full((4, 4), 0.4)) == pytest.approx(0.4)
    m = torch.full((5, 5), 0.1, dtype=torch.float64)
    m[2, 3] = 0.9
    assert max_score_baseline(m) == 0.9
    flat = m.flatten()[torch.as_tensor(rng.permutation(25))].reshape(5, 5)
    assert max_score_baseline(flat) == 0.9
