"""Toy frozen dual encoder: a patch ViT image tower and a causal text tower.

Both towers run "prompting layers": for layers ``j <= J`` fresh prompt rows are
appended after the vanilla tokens and their outputs are discarded; deeper
layers carry the prompt rows produced by layer ``J`` forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigError, InputError, UsageError
from .numerics import DTYPE, tensor_digest

PAD, BOS, EOS, UNK = 0, 1, 2, 3
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_WORDS = (
    "a", "photo", "of", "the", "an", "normal", "damaged", "flawless", "perfect",
    "broken", "defective", "object", "squares", "disks", "bars", "widget",
    "texture", "surface", "with", "defect", "good", "bad",
)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim_v: int = 32
    embed_dim_t: int = 32
    shared_dim: int = 32
    num_layers: int = 6
    num_heads: int = 4
    context_len: int = 12
    mlp_ratio: int = 2
    hierarchy_layers: tuple[int, ...] = (2, 3, 4, 6)

    def __post_init__(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        for d in (self.embed_dim_v, self.embed_dim_t):
            if d % self.num_heads:
                raise ConfigError("embedding widths must be divisible by num_heads")
        h = tuple(self.hierarchy_layers)
        if not h or any(not 1 <= i <= self.num_layers for i in h):
            raise ConfigError(f"hierarchy_layers {h} must lie in [1, {self.num_layers}]")
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError("hierarchy_layers must be strictly increasing")
        if self.context_len < 2:
            raise ConfigError("context_len must leave room for BOS and EOS")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


class Vocabulary:
    """Word-level vocabulary with four reserved ids (PAD, BOS, EOS, UNK)."""

    def __init__(self, words: Sequence[str] = DEFAULT_WORDS) -> None:
        self.words = list(words)
        self.index = {w: i + len(SPECIALS) for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.words) + len(SPECIALS)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    last_index: int


def tokenize(text: str, vocab: Vocabulary, context_len: int) -> TokenSequence:
    words = text.split()
    if len(words) + 2 > context_len:
        raise InputError(f"{text!r} needs {len(words) + 2} tokens, context_len is {context_len}")
    ids = [BOS] + [vocab.id(w) for w in words] + [EOS]
    last = len(ids) - 1
    ids += [PAD] * (context_len - len(ids))
    return TokenSequence(tuple(ids), last)


def _gauss(gen: torch.Generator, *shape: int, fan_in: int) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE) / math.sqrt(fan_in)


class FrozenBlock(nn.Module):
    """Pre-LN transformer block (multi-head attention + GELU MLP)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, gen: torch.Generator) -> None:
        super().__init__()
        hidden = dim * mlp_ratio
        self.heads = heads
        self.ln1_w = _frozen(torch.ones(dim, dtype=DTYPE))
        self.ln1_b = _frozen(torch.zeros(dim, dtype=DTYPE))
        self.qkv = _frozen(_gauss(gen, dim, 3 * dim, fan_in=dim))
        self.out = _frozen(_gauss(gen, dim, dim, fan_in=dim))
        self.ln2_w = _frozen(torch.ones(dim, dtype=DTYPE))
        self.ln2_b = _frozen(torch.zeros(dim, dtype=DTYPE))
        self.fc1 = _frozen(_gauss(gen, dim, hidden, fan_in=dim))
        self.fc2 = _frozen(_gauss(gen, hidden, dim, fan_in=hidden))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, T, D); mask: (T, T) or (B, T, T) boolean, True = may attend
        b, t, d = x.shape
        hd = d // self.heads
        h = nn.functional.layer_norm(x, (d,), self.ln1_w, self.ln1_b)
        q, k, v = (h @ self.qkv).split(d, dim=-1)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        if mask is not None:
            m = mask if mask.dim() == 3 else mask.unsqueeze(0)
            att = att.masked_fill(~m.unsqueeze(1), float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + y @ self.out
        h = nn.functional.layer_norm(x, (d,), self.ln2_w, self.ln2_b)
        return x + nn.functional.gelu(h @ self.fc1) @ self.fc2


def _frozen(t: torch.Tensor) -> nn.Parameter:
    return nn.Parameter(t, requires_grad=False)


class EncoderWeights(nn.Module):
    """All frozen parameters of both towers, drawn from one seeded generator.

    Draw order: patch embedding, class token, image positions, image blocks,
    token table, text positions, text blocks, ImageProj, TextProj. Linear maps
    and embeddings are N(0, 1/fan_in); layer-norm scales are 1, shifts 0;
    ImageProj has a zero bias.
    """

    def __init__(self, cfg: EncoderConfig, vocab_size: int, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        dv, dt, du = cfg.embed_dim_v, cfg.embed_dim_t, cfg.shared_dim
        pp = cfg.patch_size**2
        self.patch_embed = _frozen(_gauss(gen, pp, dv, fan_in=pp))
        self.class_token = _frozen(_gauss(gen, dv, fan_in=dv))
        self.image_pos = _frozen(_gauss(gen, cfg.num_patches + 1, dv, fan_in=dv))
        self.image_blocks = nn.ModuleList(
            FrozenBlock(dv, cfg.num_heads, cfg.mlp_ratio, gen) for _ in range(cfg.num_layers)
        )
        self.token_embedding = _frozen(_gauss(gen, vocab_size, dt, fan_in=dt))
        self.text_pos = _frozen(_gauss(gen, cfg.context_len, dt, fan_in=dt))
        self.text_blocks = nn.ModuleList(
            FrozenBlock(dt, cfg.num_heads, cfg.mlp_ratio, gen) for _ in range(cfg.num_layers)
        )
        self.image_proj = _frozen(_gauss(gen, dv, du, fan_in=dv))
        self.image_proj_bias = _frozen(torch.zeros(du, dtype=DTYPE))
        self.text_proj = _frozen(_gauss(gen, dt, du, fan_in=dt))

    def digest(self) -> str:
        return tensor_digest(self.named_parameters())


def patchify(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(H, W) -> (N, patch*patch), patches in row-major grid order."""
    h, w = img.shape
    g_h, g_w = h // patch, w // patch
    return img.reshape(g_h, patch, g_w, patch).permute(0, 2, 1, 3).reshape(g_h * g_w, patch * patch)


def _run_prompted(
    blocks: nn.ModuleList,
    x: torch.Tensor,
    prompts: Sequence[torch.Tensor] | None,
    mask_fn,
    record: Sequence[int] = (),
    trace: list | None = None,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Run the prompting-layer schedule over ``blocks``.

    ``x`` is (B, T, D) vanilla tokens, ``prompts`` a list of J tensors
    (B, M_p, D) or None for a prompt-free pass. Returns the final vanilla
    tokens and the vanilla tokens after each recorded (1-based) layer.
    """
    n_vanilla = x.shape[1]
    depth = 0 if prompts is None else len(prompts)
    carried = None
    recorded: dict[int, torch.Tensor] = {}
    for j, block in enumerate(blocks, start=1):
        if j <= depth:
            p = prompts[j - 1]
        else:
            p = carried
        if p is None:
            x = block(x, mask_fn(n_vanilla, 0))
            rows = (n_vanilla, n_vanilla)
        else:
            y = block(torch.cat([x, p], dim=1), mask_fn(n_vanilla, p.shape[1]))
            x, carried = y[:, :n_vanilla], y[:, n_vanilla:]
            rows = (y.shape[1], n_vanilla if j <= depth else y.shape[1])
        if trace is not None:
            trace.append((j, *rows))
        if j in record:
            recorded[j] = x
    return x, recorded


def _check_prompts(prompts, width: int) -> None:
    if prompts is None:
        return
    for j, p in enumerate(prompts, start=1):
        if p is None:
            raise UsageError(f"missing prompts for layer {j}")
        if p.shape[-1] != width:
            raise UsageError(f"prompt width {p.shape[-1]} != {width} at layer {j}")


def encode_image(
    weights: EncoderWeights,
    img: torch.Tensor,
    prompts: Sequence[torch.Tensor] | None = None,
    trace: list | None = None,
) -> tuple[dict[int, torch.Tensor], torch.Tensor]:
    """Encode one grayscale image.

    ``prompts`` holds one (M_p, d_v) block per prompted layer, or None for the
    vanilla tower. Returns ``({layer: (N, d_v)}, class_token (d_v,))`` with
    layers taken from ``cfg.hierarchy_layers``.
    """
    cfg = weights.cfg
    if tuple(img.shape) != (cfg.image_size, cfg.image_size):
        raise InputError(f"image shape {tuple(img.shape)} does not match {cfg.image_size}x{cfg.image_size}")
    _check_prompts(prompts, cfg.embed_dim_v)
    tokens = patchify((img - PIXEL_MEAN) / PIXEL_STD, cfg.patch_size) @ weights.patch_embed
    x = torch.cat([weights.class_token.unsqueeze(0), tokens], dim=0) + weights.image_pos
    batched = None if prompts is None else [p.unsqueeze(0) for p in prompts]
    x, rec = _run_prompted(weights.image_blocks, x.unsqueeze(0), batched, lambda n, m: None, cfg.hierarchy_layers, trace)
    patches = {j: t[0, 1:] for j, t in rec.items()}
    return patches, x[0, 0]


def _text_mask(seqs: Sequence[TokenSequence]):
    # Causal over real tokens, pads hidden as keys, prompt rows visible to every query.
    valid = torch.tensor([[i <= s.last_index for i in range(len(s.ids))] for s in seqs])

    def mask_fn(n: int, m: int) -> torch.Tensor:
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        key_ok = causal.unsqueeze(0) & valid.unsqueeze(1)
        if m == 0:
            return key_ok
        b = key_ok.shape[0]
        top = torch.cat([key_ok, torch.ones(b, n, m, dtype=torch.bool)], dim=2)
        bottom = torch.cat([valid.unsqueeze(1).expand(b, m, n), torch.ones(b, m, m, dtype=torch.bool)], dim=2)
        return torch.cat([top, bottom], dim=1)

    return mask_fn


def encode_text(
    weights: EncoderWeights,
    seqs: Sequence[TokenSequence],
    prompts: Sequence[torch.Tensor] | None = None,
    trace: list | None = None,
) -> torch.Tensor:
    """Encode a batch of token sequences to (B, d_u) shared-space vectors."""
    cfg = weights.cfg
    for s in seqs:
        if len(s.ids) != cfg.context_len:
            raise InputError(f"token sequence length {len(s.ids)} != context_len {cfg.context_len}")
    _check_prompts(prompts, cfg.embed_dim_t)
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    x = weights.token_embedding[ids] + weights.text_pos
    batched = None if prompts is None else [p.unsqueeze(0).expand(len(seqs), -1, -1) for p in prompts]
    x, _ = _run_prompted(weights.text_blocks, x, batched, _text_mask(seqs), trace=trace)
    last = torch.tensor([s.last_index for s in seqs])
    return x[torch.arange(len(seqs)), last] @ weights.text_proj


def image_global(weights: EncoderWeights, class_final: torch.Tensor) -> torch.Tensor:
    """Project the final class token into the shared space."""
    if class_final.shape != (weights.cfg.embed_dim_v,):
        raise UsageError(f"class token shape {tuple(class_final.shape)} != ({weights.cfg.embed_dim_v},)")
    return class_final @ weights.image_proj + weights.image_proj_bias

