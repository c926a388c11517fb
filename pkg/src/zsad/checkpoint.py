"""Self-contained binary checkpoints.

Layout (all integers little-endian)::

    b"ADCL"                   magic
    u32                       format version
    32 bytes                  SHA-256 of the config text
    u32 + bytes               config text (UTF-8)
    u32 + bytes               vocabulary, one word per line (UTF-8)
    u32                       tensor count
    per tensor, sorted by name:
        u16 + bytes           name (UTF-8)
        4 bytes               dtype tag b"f64\\0"
        u32                   rank
        u64 * rank            extents
        f64 * prod(extents)   payload, row-major

Model parameters are stored under their module paths; optimizer velocities
under ``optim.velocity.<parameter name>``.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, parse_config
from .encoders import Vocabulary
from .errors import FormatError
from .training import MomentumSGD

MAGIC = b"ADCL"
VERSION = 1
DTYPE_TAG = b"f64\0"
VELOCITY_PREFIX = "optim.velocity."


def _named_tensors(model, optimizer: MomentumSGD | None) -> dict[str, torch.Tensor]:
    out = {n: p.detach() for n, p in model.named_parameters()}
    if optimizer is not None:
        out.update({VELOCITY_PREFIX + n: v for n, v in optimizer.velocity.items()})
    return out


def encode_checkpoint(model, optimizer: MomentumSGD | None = None) -> bytes:
    cfg_text = model.cfg.dumps().encode("utf-8")
    vocab_text = "".join(w + "\n" for w in model.vocab.words).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg_text).digest(),
             struct.pack("<I", len(cfg_text)), cfg_text, struct.pack("<I", len(vocab_text)), vocab_text]
    tensors = _named_tensors(model, optimizer)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].cpu().numpy(), dtype="<f8")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, DTYPE_TAG, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[RunConfig, Vocabulary, dict[str, torch.Tensor]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    digest = r.take(32)
    (n,) = r.unpack("<I")
    cfg_text = r.take(n)
    if hashlib.sha256(cfg_text).digest() != digest:
        raise FormatError("config digest mismatch", 8)
    (n,) = r.unpack("<I")
    vocab = Vocabulary([w for w in r.take(n).decode("utf-8").splitlines() if w])
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        at = r.pos
        if r.take(4) != DTYPE_TAG:
            raise FormatError(f"tensor {name!r}: unsupported dtype tag", at)
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the tensor table", r.pos)
    return parse_config(cfg_text.decode("utf-8")), vocab, tensors


def save_checkpoint(path: str | Path, model, optimizer: MomentumSGD | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, optimizer))


def load_checkpoint(path: str | Path):
    """Rebuild ``(model, optimizer)`` from a checkpoint file."""
    from .model import ZeroShotDetector

    cfg, vocab, tensors = decode_checkpoint(Path(path).read_bytes())
    model = ZeroShotDetector(cfg, vocab)
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise FormatError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {tuple(p.shape)}")
            p.copy_(t)
    optimizer = MomentumSGD(model.trainable_parameters(), cfg.train.learning_rate, cfg.train.momentum)
    for name in optimizer.velocity:
        key = VELOCITY_PREFIX + name
        if key in tensors:
            optimizer.velocity[name] = tensors[key].clone()
    return model, optimizer
