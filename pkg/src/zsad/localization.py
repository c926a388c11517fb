"""Learnable patch projection and pixel-level anomaly maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import UsageError
from .numerics import DTYPE, bilinear_resize, cosine_similarity, softmax_pair


class ProjectionLayer(nn.Module):
    """Trainable affine map from patch width d_v to the shared width d_u."""

    def __init__(self, dim_in: int, dim_out: int, seed: int = 0) -> None:
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(dim_in, dim_out, generator=gen, dtype=DTYPE) / dim_in**0.5)
        self.bias = nn.Parameter(torch.zeros(dim_out, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return project_patches(x, self)


@dataclass
class AnomalyOutput:
    per_layer_maps: dict[int, torch.Tensor]
    aggregated_map: torch.Tensor
    image_score: torch.Tensor | None
    # pre-resize per-patch scores, per layer and multi-layer mean
    per_layer_patch_scores: dict[int, torch.Tensor] = field(default_factory=dict)
    patch_scores: torch.Tensor | None = None


def project_patches(patch_embeds: torch.Tensor, proj: ProjectionLayer) -> torch.Tensor:
    if patch_embeds.shape[-1] != proj.weight.shape[0]:
        raise UsageError(f"patch width {patch_embeds.shape[-1]} != projection input {proj.weight.shape[0]}")
    return patch_embeds @ proj.weight + proj.bias


def patch_anomaly_scores(
    F_P: torch.Tensor, F_T_N: torch.Tensor, F_T_A: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Per-patch abnormal probability from cosine similarities to both captions."""
    cos_a = cosine_similarity(F_P, F_T_A)
    cos_n = cosine_similarity(F_P, F_T_N)
    abnormal, _ = softmax_pair(cos_a / temperature, cos_n / temperature)
    return abnormal


def scores_to_map(scores: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    n = scores.shape[0]
    g = int(round(n**0.5))
    if g * g != n:
        raise UsageError(f"patch count {n} is not a perfect square")
    return bilinear_resize(scores.reshape(g, g), out_h, out_w)


def layer_anomaly_map(
    F_P: torch.Tensor,
    F_T_N: torch.Tensor,
    F_T_A: torch.Tensor,
    out_h: int,
    out_w: int,
    temperature: float = 1.0,
) -> torch.Tensor:
    return scores_to_map(patch_anomaly_scores(F_P, F_T_N, F_T_A, temperature), out_h, out_w)


def aggregate_maps(per_layer: Sequence[torch.Tensor]) -> torch.Tensor:
    """Elementwise mean over layers; keeps the result in [0, 1]."""
    maps = list(per_layer)
    if not maps:
        raise UsageError("aggregate_maps needs at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise UsageError("aggregate_maps: maps differ in extent")
    return torch.stack(maps).mean(dim=0)
