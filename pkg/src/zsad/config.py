"""Run configuration as flat ``section.key=value`` text.

Recognised keys (defaults in parentheses)::

    seed (0)                      temperature (1.0)
    shared_projection (true)
    encoder.image_size (32)       encoder.patch_size (8)
    encoder.embed_dim_v (32)      encoder.embed_dim_t (32)
    encoder.shared_dim (32)       encoder.num_layers (6)
    encoder.num_heads (4)         encoder.context_len (12)
    encoder.mlp_ratio (2)         encoder.hierarchy_layers (2,3,4,6)
    prompt.depth (4)              prompt.length (5)
    prompt.enable_static (true)   prompt.enable_dynamic (true)
    hsf.clusters (20)             hsf.seed (0)
    hsf.max_iter (50)             hsf.variant (top1 | legacy)
    hsf.score_source (aggregated | per_layer)
    hsf.legacy_topk (16)          hsf.legacy_clusters (4)
    train.epochs (5)              train.learning_rate (0.01)
    train.momentum (0.9)          train.w_focal_map (1.0)
    train.w_dice_map (1.0)        train.w_focal_score (1.0)
    train.focal_gamma (2.0)       train.focal_alpha (0.25)
    train.dice_eps (1.0)          train.batch_size (1)
    train.max_steps (0 = all epochs)   train.seed (0)

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoders import EncoderConfig
from .errors import ConfigError
from .hsf import HSFConfig
from .prompts import PromptConfig
from .training import TrainConfig

SECTIONS = {"encoder": EncoderConfig, "prompt": PromptConfig, "hsf": HSFConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    hsf: HSFConfig = field(default_factory=HSFConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    temperature: float = 1.0
    shared_projection: bool = True

    def __post_init__(self) -> None:
        if self.prompt.depth > self.encoder.num_layers:
            raise ConfigError("prompt.depth cannot exceed encoder.num_layers")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def replace(self, **changes) -> "RunConfig":
        """Return a copy with dotted keys (``"train.epochs"``) or top-level keys changed."""
        return from_pairs({**to_pairs(self), **{k: _fmt(v) for k, v in changes.items()}})

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in to_pairs(self).items())

    def digest(self) -> bytes:
        return hashlib.sha256(self.dumps().encode("utf-8")).digest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def to_pairs(cfg: RunConfig) -> dict[str, str]:
    out = {"seed": _fmt(cfg.seed), "temperature": _fmt(cfg.temperature),
           "shared_projection": _fmt(cfg.shared_projection)}
    for name in SECTIONS:
        sub = getattr(cfg, name)
        for f in fields(sub):
            out[f"{name}.{f.name}"] = _fmt(getattr(sub, f.name))
    return out


def from_pairs(pairs: dict[str, str]) -> RunConfig:
    defaults = RunConfig()
    top: dict[str, object] = {}
    subs: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    for key, raw in pairs.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section in {key!r}")
            known = {f.name for f in fields(SECTIONS[section])}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            subs[section][name] = _parse(raw, getattr(getattr(defaults, section), name))
        else:
            if key not in ("seed", "temperature", "shared_projection"):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _parse(raw, getattr(defaults, key))
    built = {name: dataclasses.replace(getattr(defaults, name), **vals) for name, vals in subs.items()}
    return RunConfig(**built, **top)


def parse_config(text: str) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return from_pairs(pairs)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
