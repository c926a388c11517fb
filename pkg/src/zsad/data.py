"""Synthetic auxiliary data, binary PGM I/O, manifests, and captions."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError, InputError
from .numerics import DTYPE

FAMILIES = ("squares", "disks", "bars")
BACKGROUND = 0.4
FOREGROUND = 0.75
NOISE_SIGMA = 0.05
DEFECT_SIZE = (3, 8)  # blob extent in pixels
DEFECT_DARK, DEFECT_BRIGHT = 0.05, 0.95

NORMAL_TEMPLATE = "a photo of normal [CLS]"
ABNORMAL_TEMPLATE = "a photo of damaged [CLS]"

_WS = b" \t\n\r\v\f"


# -- PGM ----------------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", start)
    return buf[start:pos], pos


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a binary (P5) PGM with maxval 255 into a uint8 array."""
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"PGM {name} is not a decimal integer: {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)", pos)
    if width < 1 or height < 1:
        raise FormatError("PGM extents must be positive", pos)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise FormatError("missing whitespace after PGM maxval", pos)
    pos += 1
    n = width * height
    if len(buf) - pos < n:
        raise FormatError(f"truncated PGM raster: need {n} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(height, width).copy()


def encode_pgm(values) -> bytes:
    """Quantise values in [0, 1] to 8 bits and emit a P5 PGM."""
    arr = np.asarray(values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else values, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError("save_pgm expects a 2-D array")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def load_pgm(path: str | Path) -> torch.Tensor:
    raw = decode_pgm(Path(path).read_bytes())
    return torch.as_tensor(raw.astype(np.float64) / 255.0)


def save_pgm(values, path: str | Path) -> None:
    Path(path).write_bytes(encode_pgm(values))


# -- manifests ------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    image_path: str
    mask_path: str
    category_name: str
    label: int


@dataclass
class DatasetManifest:
    records: list[Record]
    caption_normal_template: str = NORMAL_TEMPLATE
    caption_abnormal_template: str = ABNORMAL_TEMPLATE
    root: Path = field(default_factory=Path)

    @property
    def categories(self) -> set[str]:
        return {r.category_name for r in self.records}

    def to_json(self) -> str:
        doc = {
            "caption_abnormal_template": self.caption_abnormal_template,
            "caption_normal_template": self.caption_normal_template,
            "records": [
                {"category_name": r.category_name, "image_path": r.image_path, "label": r.label,
                 "mask_path": r.mask_path}
                for r in self.records
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        records = [Record(r["image_path"], r["mask_path"], r["category_name"], int(r["label"]))
                   for r in doc["records"]]
        return cls(records, doc["caption_normal_template"], doc["caption_abnormal_template"], path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


@dataclass
class Sample:
    image: torch.Tensor
    mask: torch.Tensor
    category: str
    label: int
    name: str = ""


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    out = []
    for r in manifest.records:
        mask = (load_pgm(manifest.resolve(r.mask_path)) > 0.5).to(DTYPE)
        if int(bool(mask.any())) != r.label:
            raise InputError(f"record {r.image_path}: label {r.label} disagrees with its mask")
        out.append(Sample(load_pgm(manifest.resolve(r.image_path)), mask, r.category_name, r.label,
                          Path(r.image_path).stem))
    return out


def assert_zero_shot(train: DatasetManifest, test: DatasetManifest) -> None:
    shared = train.categories & test.categories
    if shared:
        raise InputError(f"train and test share categories: {sorted(shared)}")


def make_captions(category: str, manifest: DatasetManifest | None = None, vocab=None) -> tuple[str, str]:
    normal_t = manifest.caption_normal_template if manifest else NORMAL_TEMPLATE
    abnormal_t = manifest.caption_abnormal_template if manifest else ABNORMAL_TEMPLATE
    for t in (normal_t, abnormal_t):
        if "[CLS]" not in t:
            raise ConfigError(f"caption template {t!r} has no [CLS] placeholder")
    normal, abnormal = normal_t.replace("[CLS]", category), abnormal_t.replace("[CLS]", category)
    if vocab is not None:
        unknown = sorted({w for w in (normal + " " + abnormal).split() if w not in vocab})
        if unknown:
            warnings.warn(f"caption words map to UNK: {unknown}", stacklevel=2)
    return normal, abnormal


# -- synthetic rendering --------------------------------------------------------

def _render_normal(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.full((size, size), BACKGROUND)
    yy, xx = np.mgrid[0:size, 0:size]
    if family == "squares":
        for _ in range(int(rng.integers(1, 4))):
            side = int(rng.integers(max(2, size // 6), max(3, size // 3) + 1))
            y0, x0 = rng.integers(0, size - side + 1, size=2)
            img[y0 : y0 + side, x0 : x0 + side] = FOREGROUND
    elif family == "disks":
        for _ in range(int(rng.integers(1, 4))):
            r = rng.uniform(size / 10, size / 5)
            cy, cx = rng.uniform(r, size - r, size=2)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = FOREGROUND
    elif family == "bars":
        vertical = bool(rng.integers(2))
        for _ in range(int(rng.integers(2, 5))):
            width = int(rng.integers(max(1, size // 12), max(2, size // 6) + 1))
            start = int(rng.integers(0, size - width + 1))
            if vertical:
                img[:, start : start + width] = FOREGROUND
            else:
                img[start : start + width, :] = FOREGROUND
    else:
        raise InputError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    return img


def _defect_footprint(size: int, rng: np.random.Generator) -> np.ndarray:
    """Irregular blob whose bounding box spans DEFECT_SIZE pixels per side."""
    lo, hi = DEFECT_SIZE
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2
    blob = r <= 1.0 + rng.uniform(-0.2, 0.2, size=(h, w))
    blob[int(round(cy)), int(round(cx))] = True
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + h, x0 : x0 + w] = blob
    return mask


def render_sample(family: str, size: int, abnormal: bool, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    img = _render_normal(family, size, rng)
    mask = np.zeros((size, size), dtype=bool)
    if abnormal:
        mask = _defect_footprint(size, rng)
        under = img[mask].mean()
        img[mask] = DEFECT_BRIGHT if under < 0.5 else DEFECT_DARK
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def gen_synthetic(
    category: str,
    n_normal: int,
    n_abnormal: int,
    image_size: int,
    seed: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Render a seeded set of normal and defective images with masks.

    Writes ``images/*.pgm``, ``masks/*.pgm`` and ``manifest.json`` under
    ``out_dir``. Defects are irregular blobs 3-8 px across, painted dark on
    bright regions and bright on dark ones; the mask is their exact footprint.
    """
    if category not in FAMILIES:
        raise InputError(f"unknown shape family {category!r}; expected one of {FAMILIES}")
    if n_normal < 0 or n_abnormal < 0 or n_normal + n_abnormal < 1 or image_size < DEFECT_SIZE[1]:
        raise InputError("need at least one image and image_size >= 8")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, FAMILIES.index(category)])
    records = []
    for i in range(n_normal + n_abnormal):
        abnormal = i >= n_normal
        img, mask = render_sample(category, image_size, abnormal, rng)
        stem = f"{category}_{i:04d}"
        save_pgm(img, out / "images" / f"{stem}.pgm")
        save_pgm(mask.astype(np.float64), out / "masks" / f"{stem}.pgm")
        records.append(Record(f"images/{stem}.pgm", f"masks/{stem}.pgm", category, int(abnormal)))
    manifest = DatasetManifest(records, root=out)
    manifest.save(out / "manifest.json")
    return manifest
