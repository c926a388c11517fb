"""AUROC and max-F1 at image and pixel level."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import MetricError
from .hsf import max_score_baseline

if TYPE_CHECKING:
    from .data import DatasetManifest, Sample
    from .model import ZeroShotDetector

POOLING_NOTE = "pixel metrics pool every pixel of every test image into one curve"


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else scores,
                   dtype=np.float64).ravel()
    y = np.asarray(labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of the ROC area, ties counted as one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined unless both classes are present")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_from_counts(tp: int, fp: int, n_pos: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return 2 * precision * recall / (precision + recall)


def max_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds at the distinct scores (positive when ``score >= t``).

    Returns ``(f1, threshold)``; on ties the smallest threshold wins.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("max-F1 is undefined without positive labels")
    thresholds = np.unique(s)
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    best, best_t = -1.0, float(thresholds[0])
    for t, a, b in zip(thresholds, tp, fp):
        f = f1_from_counts(int(a), int(b), n_pos)
        if f > best:
            best, best_t = f, float(t)
    return best, best_t


def infer_samples(
    model: "ZeroShotDetector",
    samples: Sequence["Sample"],
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> list[dict]:
    """Run the detector over samples without gradients.

    With ``noise_sigma > 0`` seeded Gaussian noise is added to each
    aggregated pixel map; the max baseline reads the noisy map, and HSF ranks
    clusters by the patch scores plus the mean noise over each patch cell.
    """
    results = []
    ps = model.cfg.encoder.patch_size
    with torch.no_grad():
        for i, s in enumerate(samples):
            offset = noise = None
            if noise_sigma > 0:
                rng = np.random.default_rng([seed, i])
                noise = torch.as_tensor(rng.normal(0.0, noise_sigma, size=tuple(s.image.shape)))
                g = noise.shape[0] // ps
                offset = noise.reshape(g, ps, g, ps).mean(dim=(1, 3)).reshape(-1)
            out = model(s.image, s.category, hsf_seed=seed, ranking_offset=offset)
            amap = out.aggregated_map if noise is None else out.aggregated_map + noise
            results.append({
                "map": amap.numpy().copy(),
                "hsf_score": float(out.image_score),
                "max_score": max_score_baseline(amap),
                "label": s.label,
                "mask": s.mask.numpy().astype(np.int8),
            })
    return results


def evaluate(
    model: "ZeroShotDetector",
    data: "DatasetManifest | Sequence[Sample]",
    seed: int = 0,
    noise_sigma: float = 0.0,
    image_score: str = "hsf",
) -> dict:
    """Image- and pixel-level AUROC / max-F1 over a test set."""
    from .data import DatasetManifest, load_samples

    samples = load_samples(data) if isinstance(data, DatasetManifest) else list(data)
    res = infer_samples(model, samples, seed, noise_sigma)
    labels = np.array([r["label"] for r in res])
    key = {"hsf": "hsf_score", "max": "max_score"}[image_score]
    img_scores = np.array([r[key] for r in res])
    pix_scores = np.concatenate([r["map"].ravel() for r in res])
    pix_labels = np.concatenate([r["mask"].ravel() for r in res])
    report = {}
    for level, s, y in (("image", img_scores, labels), ("pixel", pix_scores, pix_labels)):
        try:
            report[f"{level}_auroc"] = auroc(s, y)
            report[f"{level}_max_f1"] = max_f1(s, y)[0]
        except MetricError as exc:
            raise MetricError(f"{level}-level: {exc}") from exc
    report["image_score"] = image_score
    report["pixel_pooling"] = POOLING_NOTE
    report["n_images"] = len(res)
    report["config_digest"] = model.cfg.digest().hex()
    return report


def format_report(report: dict) -> str:
    lines = [f"# {report.get('pixel_pooling', POOLING_NOTE)}"]
    if "config_digest" in report:
        lines.append(f"# config sha256 {report['config_digest']}")
    lines.append(f"{'metric':<16}{'value':>10}")
    for k in ("image_auroc", "image_max_f1", "pixel_auroc", "pixel_max_f1"):
        lines.append(f"{k:<16}{report[k]:>10.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out: str | Path) -> tuple[Path, Path]:
    """Write ``<out>.txt`` and ``<out>.json`` (or ``out/report.*`` for a directory)."""
    out = Path(out)
    if out.suffix:
        base = out.with_suffix("")
    else:
        out.mkdir(parents=True, exist_ok=True)
        base = out / "report"
    txt, js = base.with_suffix(".txt"), base.with_suffix(".json")
    txt.write_text(format_report(report), encoding="utf-8")
    js.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return txt, js
