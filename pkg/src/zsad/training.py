"""Losses, momentum SGD, and the frozen-backbone training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np
import torch

from .errors import ConfigError, InputError, UsageError
from .localization import AnomalyOutput
from .numerics import as_tensor

if TYPE_CHECKING:
    from .data import DatasetManifest, Sample
    from .model import ZeroShotDetector

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    w_focal_map: float = 1.0
    w_dice_map: float = 1.0
    w_focal_score: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    batch_size: int = 1
    max_steps: int = 0  # 0 = run all epochs
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError("focal_alpha must lie in (0, 1)")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")


def _check_binary(target: torch.Tensor) -> None:
    if not bool(((target == 0) | (target == 1)).all()):
        raise InputError("targets must be 0 or 1")


def focal_loss(pred, target, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log(p_t)`` with p clamped to [1e-7, 1 - 1e-7]."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise UsageError(f"focal_loss shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    _check_binary(target)
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = torch.where(target == 1, p, 1.0 - p)
    alpha_t = torch.where(target == 1, alpha, 1.0 - alpha)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred, target, eps: float = 1.0) -> torch.Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise UsageError(f"dice_loss shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    _check_binary(target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def total_loss(out: AnomalyOutput, mask, label: int, cfg: TrainConfig) -> torch.Tensor:
    """Weighted focal + dice on the aggregated map plus focal on the image score."""
    mask = as_tensor(mask)
    if mask.shape != out.aggregated_map.shape:
        raise UsageError(f"mask shape {tuple(mask.shape)} != map shape {tuple(out.aggregated_map.shape)}")
    if int(label) != int(bool((mask > 0).any())):
        raise InputError(f"label {label} is inconsistent with the mask")
    loss = out.aggregated_map.new_zeros(())
    if cfg.w_focal_map:
        loss = loss + cfg.w_focal_map * focal_loss(out.aggregated_map, mask, cfg.focal_alpha, cfg.focal_gamma)
    if cfg.w_dice_map:
        loss = loss + cfg.w_dice_map * dice_loss(out.aggregated_map, mask, cfg.dice_eps)
    if cfg.w_focal_score:
        if out.image_score is None:
            raise UsageError("score loss requested but the output has no image score")
        target = torch.tensor(float(label), dtype=out.image_score.dtype)
        loss = loss + cfg.w_focal_score * focal_loss(out.image_score, target, cfg.focal_alpha, cfg.focal_gamma)
    return loss


class MomentumSGD:
    """``v <- momentum * v + g; w <- w - lr * v``, then gradients are cleared."""

    def __init__(self, params: Mapping[str, torch.nn.Parameter], lr: float, momentum: float = 0.9) -> None:
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient")
        with torch.no_grad():
            for name, p in self.params.items():
                v = self.velocity[name]
                v.mul_(self.momentum).add_(p.grad)
                p.sub_(self.lr * v)
                p.grad = None


def sgd_step(optimizer: MomentumSGD) -> None:
    optimizer.step()


def fill_gradients(loss: torch.Tensor, params: Mapping[str, torch.nn.Parameter]) -> None:
    """Backpropagate ``loss``; parameters off the graph get an explicit zero gradient."""
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    for n, g in zip(names, grads):
        p = params[n]
        g = torch.zeros_like(p) if g is None else g
        p.grad = g if p.grad is None else p.grad + g


@dataclass
class LossRecord:
    epoch: int
    step: int
    loss: float


def train(
    model: "ZeroShotDetector",
    samples: "Iterable[Sample] | DatasetManifest",
    cfg: TrainConfig | None = None,
    optimizer: MomentumSGD | None = None,
) -> tuple["ZeroShotDetector", list[LossRecord], MomentumSGD]:
    """Optimise prompts and projection on annotated auxiliary samples.

    Each epoch visits the samples in a seeded shuffled order. Returns the
    model (trained in place), one log row per optimizer step, and the
    optimizer holding its velocities.
    """
    from .data import DatasetManifest, load_samples

    cfg = cfg or model.cfg.train
    data = load_samples(samples) if isinstance(samples, DatasetManifest) else list(samples)
    if not data:
        raise InputError("training set is empty")
    params = model.trainable_parameters()
    opt = optimizer or MomentumSGD(params, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    records: list[LossRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            loss = sum(
                total_loss(model(s.image, s.category), s.mask, s.label, cfg) for s in batch
            ) / len(batch)
            fill_gradients(loss, params)
            opt.step()
            step += 1
            records.append(LossRecord(epoch, step, float(loss.detach())))
            if cfg.max_steps and step >= cfg.max_steps:
                break
        log.info("epoch %d mean loss %.6f", epoch, epoch_means(records).get(epoch, float("nan")))
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return model, records, opt


def epoch_means(records: Iterable[LossRecord]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for r in records:
        sums.setdefault(r.epoch, []).append(r.loss)
    return {e: float(np.mean(v)) for e, v in sums.items()}


def write_loss_csv(records: Iterable[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        for r in records:
            w.writerow([r.epoch, r.step, repr(r.loss)])
