"""Dense float64 tensor kernels and the differentiation contract.

Tensors are plain ``torch.Tensor`` objects in ``torch.float64``; reverse-mode
differentiation is torch autograd. Trainable parameters are
``torch.nn.Parameter`` with ``requires_grad=True``; frozen ones are stored with
``requires_grad=False`` and never receive a gradient.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import DomainError, UsageError

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    """Convert ``x`` to a float64 tensor without copying when possible."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_finite(t: torch.Tensor, what: str = "tensor") -> None:
    if not bool(torch.isfinite(t).all()):
        raise DomainError(f"{what} contains non-finite values")


def softmax_pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-way softmax of ``a`` and ``b`` (elementwise for tensors).

    Returns ``(e^a, e^b) / (e^a + e^b)`` using max-subtraction, so large
    magnitudes do not overflow.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    check_finite(a, "softmax_pair input a")
    check_finite(b, "softmax_pair input b")
    m = torch.maximum(a, b).detach()
    ea = torch.exp(a - m)
    eb = torch.exp(b - m)
    z = ea + eb
    pa = ea / z
    return pa, 1.0 - pa


def cosine_similarity(u, v) -> torch.Tensor:
    """Cosine similarity clamped to [-1, 1].

    ``u`` may be a single vector or a stack of row vectors; ``v`` is a vector
    of matching length. Zero-norm inputs raise :class:`DomainError`.
    """
    u = as_tensor(u)
    v = as_tensor(v)
    if v.dim() != 1 or u.shape[-1] != v.shape[0] or v.shape[0] < 1:
        raise UsageError(f"cosine_similarity: incompatible shapes {tuple(u.shape)} and {tuple(v.shape)}")
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v)
    if bool((nu.detach() == 0).any()) or float(nv.detach()) == 0.0:
        raise DomainError("cosine_similarity of a zero-norm vector is undefined")
    cos = (u @ v) / (nu * nv)
    return torch.clamp(cos, -1.0, 1.0)


def _interp_matrix(n_in: int, n_out: int) -> torch.Tensor:
    # Corner-aligned: output i samples input position i * (n_in - 1) / (n_out - 1).
    w = torch.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == n_out:
        return torch.eye(n_in, dtype=DTYPE)
    if n_out == 1 or n_in == 1:
        w[:, 0] = 1.0
        return w
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        pos = i * scale
        lo = min(int(math.floor(pos)), n_in - 1)
        frac = pos - lo
        if lo == n_in - 1:
            w[i, lo] = 1.0
        else:
            w[i, lo] = 1.0 - frac
            w[i, lo + 1] = frac
    return w


_INTERP_CACHE: dict[tuple[int, int], torch.Tensor] = {}


def interp_matrix(n_in: int, n_out: int) -> torch.Tensor:
    key = (n_in, n_out)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(n_in, n_out)
    return _INTERP_CACHE[key]


def bilinear_resize(grid, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear interpolation of a 2-D grid with corner-aligned sampling.

    Each output pixel is a convex combination of at most four input cells, so
    the output never leaves ``[grid.min(), grid.max()]``. Same-size resizing
    returns the grid values unchanged.
    """
    grid = as_tensor(grid)
    if grid.dim() != 2:
        raise UsageError(f"bilinear_resize expects a 2-D grid, got shape {tuple(grid.shape)}")
    h, w = grid.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise DomainError("bilinear_resize requires positive extents")
    if (h, w) == (out_h, out_w):
        return grid.clone()
    return interp_matrix(h, out_h) @ grid @ interp_matrix(w, out_w).T


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every trainable parameter.

    Frozen tensors (``requires_grad=False``) receive nothing. Repeated calls
    without zeroing accumulate.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise UsageError("backward expects a scalar tensor")
    if not loss.requires_grad:
        raise UsageError("backward called on a scalar with no recorded graph")
    loss.backward()


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    p: torch.Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
    analytic: torch.Tensor | None = None,
) -> float:
    """Max relative error between the autograd gradient and central differences.

    ``f`` is evaluated with no arguments and must read ``p`` in place.
    ``coords`` restricts the check to a subset of flat indices (all by
    default). The error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if step <= 0:
        raise DomainError("finite_diff_check step must be positive")
    if analytic is None:
        if p.grad is not None:
            p.grad = None
        loss = f()
        if loss.requires_grad:
            (g,) = torch.autograd.grad(loss, [p], allow_unused=True)
        else:
            g = None
        analytic = torch.zeros_like(p) if g is None else g.detach()
    analytic = analytic.reshape(-1)
    flat = p.data.view(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + step
            f_plus = float(f())
            flat[i] = orig - step
            f_minus = float(f())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(float(analytic[i]) - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def tensor_digest(tensors: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over (name, shape, little-endian float64 bytes), sorted by name."""
    h = hashlib.sha256()
    for name, t in sorted(tensors, key=lambda kv: kv[0]):
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(arr.shape)).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
