import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zsad.errors import DomainError, UsageError
from zsad.numerics import (
    backward,
    bilinear_resize,
    cosine_similarity,
    finite_diff_check,
    softmax_pair,
    tensor_digest,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


def test_softmax_pair_examples():
    a, b = softmax_pair(0.0, 0.0)
    assert float(a) == 0.5 and float(b) == 0.5
    a, b = softmax_pair(1.0, -1.0)
    assert float(a) == pytest.approx(0.880797, abs=1e-6)
    assert float(b) == pytest.approx(0.119203, abs=1e-6)
    a, b = softmax_pair(1000.0, 0.0)
    assert abs(float(a) - 1.0) <= 1e-12 and abs(float(b)) <= 1e-12


def test_softmax_pair_rejects_non_finite():
    with pytest.raises(DomainError):
        softmax_pair(float("nan"), 0.0)
    with pytest.raises(DomainError):
        softmax_pair(0.0, float("inf"))


@given(finite, finite)
def test_softmax_pair_sums_to_one(a, b):
    pa, pb = softmax_pair(a, b)
    assert abs(float(pa) + float(pb) - 1.0) <= 1e-12
    assert 0.0 <= float(pa) <= 1.0
    if abs(a - b) < 30:
        assert 0.0 < float(pa) < 1.0


def test_softmax_pair_matches_logistic():
    # independent route: the two-way softmax is the logistic of the difference
    for a, b in [(0.3, -0.2), (2.0, 1.5), (-4.0, 3.0)]:
        assert float(softmax_pair(a, b)[0]) == pytest.approx(1.0 / (1.0 + math.exp(b - a)), abs=1e-15)


def test_cosine_examples():
    assert float(cosine_similarity([1.0, 0.0], torch.tensor([1.0, 0.0]))) == 1.0
    assert float(cosine_similarity([1.0, 0.0], torch.tensor([0.0, 1.0]))) == 0.0
    assert float(cosine_similarity([1.0, 2.0, 3.0], torch.tensor([4.0, 5.0, 6.0]))) == pytest.approx(0.974631, abs=1e-6)


def test_cosine_zero_norm():
    with pytest.raises(DomainError):
        cosine_similarity([0.0, 0.0], torch.tensor([1.0, 0.0]))
    with pytest.raises(UsageError):
        cosine_similarity([1.0, 0.0], torch.tensor([1.0, 0.0, 0.0]))


@given(st.lists(st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=1, max_size=8))
def test_cosine_self_and_negation(vals):
    u = torch.tensor(vals, dtype=torch.float64)
    if float(u.norm()) < 1e-6:
        return
    assert float(cosine_similarity(u, u)) == pytest.approx(1.0, abs=1e-12)
    assert float(cosine_similarity(u, -u)) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_rowwise_matches_loop(rng):
    u = torch.as_tensor(rng.normal(size=(5, 4)))
    v = torch.as_tensor(rng.normal(size=4))
    rows = cosine_similarity(u, v)
    for i in range(5):
        expect = float(u[i] @ v) / (float(u[i].norm()) * float(v.norm()))
        assert float(rows[i]) == pytest.approx(expect, abs=1e-14)


def test_bilinear_examples():
    out = bilinear_resize(torch.full((3, 3), 0.7, dtype=torch.float64), 7, 5)
    assert torch.allclose(out, torch.full((7, 5), 0.7, dtype=torch.float64), atol=1e-15)
    out = bilinear_resize(torch.tensor([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    for row in out:
        assert np.allclose(row.numpy(), [0, 1 / 3, 2 / 3, 1], atol=1e-15)
    g = torch.rand(4, 6, dtype=torch.float64)
    assert torch.equal(bilinear_resize(g, 4, 6), g)


def test_bilinear_zero_extent():
    with pytest.raises(DomainError):
        bilinear_resize(torch.ones(2, 2), 0, 3)


def _bilinear_oracle(grid: np.ndarray, oh: int, ow: int) -> np.ndarray:
    # per-pixel corner-aligned interpolation, written independently of the matrix form
    h, w = grid.shape
    out = np.empty((oh, ow))
    for i in range(oh):
        y = 0.0 if oh == 1 else i * (h - 1) / (oh - 1)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(ow):
            x = 0.0 if ow == 1 else j * (w - 1) / (ow - 1)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
            bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_bilinear_matches_oracle_and_bounds(h, w, oh, ow, seed):
    grid = np.random.default_rng(seed).random((h, w))
    out = bilinear_resize(torch.as_tensor(grid), oh, ow).numpy()
    assert np.allclose(out, _bilinear_oracle(grid, oh, ow), atol=1e-12)
    assert out.min() >= grid.min() - 1e-12 and out.max() <= grid.max() + 1e-12


def test_backward_examples():
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    backward(p.sum())
    assert p.grad.tolist() == [1.0, 1.0, 1.0]
    q = torch.nn.Parameter(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    backward((q * q).sum())
    assert q.grad.tolist() == [2.0, 4.0, 6.0]
    backward((q * q).sum())
    assert q.grad.tolist() == [4.0, 8.0, 12.0]  # accumulates


def test_backward_frozen_and_graphless():
    frozen = torch.nn.Parameter(torch.ones(2, dtype=torch.float64), requires_grad=False)
    p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    backward((frozen * p).sum())
    assert frozen.grad is None
    with pytest.raises(UsageError):
        backward(torch.tensor(1.0))


def test_finite_diff_examples():
    p = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
    assert finite_diff_check(lambda: (p * p).sum(), p, 1e-5) <= 1e-6
    assert finite_diff_check(lambda: torch.tensor(3.0, dtype=torch.float64), p, 1e-5) == 0.0
    with pytest.raises(DomainError):
        finite_diff_check(lambda: p.sum(), p, 0.0)


def test_finite_diff_detects_wrong_gradient():
    p = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
    wrong = torch.tensor([2.0, 5.0], dtype=torch.float64)
    assert finite_diff_check(lambda: (p * p).sum(), p, 1e-5, analytic=wrong) > 0.2


def test_composite_kernels_gradcheck(rng):
    # every kernel in the supported set composed into one scalar
    p = torch.nn.Parameter(torch.as_tensor(rng.normal(size=(4, 3))))
    v = torch.as_tensor(rng.normal(size=3))

    def f():
        h = torch.nn.functional.layer_norm(p @ torch.eye(3, dtype=torch.float64) * 1.3, (3,))
        h = torch.nn.functional.gelu(torch.cat([h, p[:2]], dim=0))
        cos = cosine_similarity(h, v)
        a, _ = softmax_pair(cos, -cos)
        g = bilinear_resize(a[:4].reshape(2, 2), 3, 3)
        return g.mean() + a.sum()

    assert finite_diff_check(f, p, 1e-5) <= 1e-6


def test_tensor_digest_order_and_sensitivity():
    a = torch.zeros(2, dtype=torch.float64)
    b = torch.ones(3, dtype=torch.float64)
    assert tensor_digest([("a", a), ("b", b)]) == tensor_digest([("b", b), ("a", a)])
    assert tensor_digest([("a", a)]) != tensor_digest([("a", a + 1e-300)])
