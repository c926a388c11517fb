"""Static prompts, the dynamic prompt generator, and their hybrid sum."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
from torch import nn

from .encoders import EncoderWeights, encode_image
from .errors import ConfigError, InputError, UsageError
from .numerics import DTYPE

if TYPE_CHECKING:
    from .model import ZeroShotDetector


@dataclass(frozen=True)
class PromptConfig:
    depth: int = 4
    length: int = 5
    enable_static: bool = True
    enable_dynamic: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("prompt depth must be >= 1")
        if self.length < 1:
            raise ConfigError("prompt length must be >= 1")

    @property
    def variant(self) -> str:
        return {(False, False): "V1", (True, False): "V2", (False, True): "V3", (True, True): "V4"}[
            (self.enable_static, self.enable_dynamic)
        ]

    @classmethod
    def from_variant(cls, name: str, depth: int = 4, length: int = 5) -> "PromptConfig":
        flags = {"V1": (False, False), "V2": (True, False), "V3": (False, True), "V4": (True, True)}
        if name not in flags:
            raise ConfigError(f"unknown prompt variant {name!r}")
        s, d = flags[name]
        return cls(depth, length, s, d)


class PromptSet(nn.Module):
    """Learnable prompt parameters for both towers.

    Static prompts start from N(0, 0.02^2); the generator's linear maps start
    at zero, so an untrained hybrid model equals the static-only model.
    """

    def __init__(self, cfg: PromptConfig, dim_v: int, dim_t: int, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        self.dim_v, self.dim_t = dim_v, dim_t
        gen = torch.Generator().manual_seed(seed)
        j, m = cfg.depth, cfg.length
        self.static_image = nn.Parameter(0.02 * torch.randn(j, m, dim_v, generator=gen, dtype=DTYPE))
        self.static_text = nn.Parameter(0.02 * torch.randn(j, m, dim_t, generator=gen, dtype=DTYPE))
        self.dpg_image_weight = nn.Parameter(torch.zeros(dim_v, j * m * dim_v, dtype=DTYPE))
        self.dpg_image_bias = nn.Parameter(torch.zeros(j * m * dim_v, dtype=DTYPE))
        self.dpg_text_weight = nn.Parameter(torch.zeros(dim_v, j * m * dim_t, dtype=DTYPE))
        self.dpg_text_bias = nn.Parameter(torch.zeros(j * m * dim_t, dtype=DTYPE))


def generate_dynamic(
    img: torch.Tensor, backbone: EncoderWeights, pset: PromptSet
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image prompts from the prompt-free tower's final class token."""
    with torch.no_grad():
        _, cls = encode_image(backbone, img, None)
    j, m = pset.cfg.depth, pset.cfg.length
    p_img = (cls @ pset.dpg_image_weight + pset.dpg_image_bias).view(j, m, pset.dim_v)
    p_txt = (cls @ pset.dpg_text_weight + pset.dpg_text_bias).view(j, m, pset.dim_t)
    return p_img, p_txt


def combine_hybrid(
    static: torch.Tensor | None, dynamic: torch.Tensor | None, cfg: PromptConfig
) -> torch.Tensor:
    """Elementwise static + dynamic sum; a disabled branch contributes zero."""
    s = static if cfg.enable_static else None
    d = dynamic if cfg.enable_dynamic else None
    if s is not None and d is not None:
        if s.shape != d.shape:
            raise UsageError(f"prompt shape mismatch {tuple(s.shape)} vs {tuple(d.shape)}")
        return s + d
    if s is not None:
        return s
    if d is not None:
        return d
    ref = static if static is not None else dynamic
    if ref is None:
        raise UsageError("combine_hybrid needs at least one block to infer the shape")
    return torch.zeros_like(ref)


def refine_prompts_per_image(
    img: torch.Tensor,
    mask: torch.Tensor,
    model: "ZeroShotDetector",
    category: str,
    steps: int,
    lr: float,
) -> PromptSet:
    """Fit a copy of the prompts to one annotated image with the map losses.

    Plain gradient descent on focal + dice over the anomaly map. The model's
    own prompts and projection are left untouched.
    """
    from .training import dice_loss, focal_loss

    if not bool(((mask == 0) | (mask == 1)).all()):
        raise InputError("refinement mask must be binary")
    refined = copy.deepcopy(model.prompts)
    if steps == 0:
        return refined
    work = model.with_prompts(refined)
    params = [p for p in refined.parameters() if p.requires_grad]
    cfg = model.train_cfg
    for _ in range(steps):
        out = work.forward(img, category, with_score=False)
        loss = focal_loss(out.aggregated_map, mask, cfg.focal_alpha, cfg.focal_gamma) + dice_loss(
            out.aggregated_map, mask, cfg.dice_eps
        )
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p -= lr * g
    return refined
