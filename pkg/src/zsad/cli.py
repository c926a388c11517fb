"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 1 runtime error. ``--seed`` is
accepted by every command; ``--dump-config`` prints the effective config and
exits without running the command.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, UsageError, ZSADError

log = logging.getLogger("zsad")

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


def default_config() -> RunConfig:
    return parse_config(resources.files("zsad").joinpath("default.cfg").read_text(encoding="utf-8"))


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    if args.seed is not None:
        cfg = cfg.replace(**{"seed": args.seed, "train.seed": args.seed, "hsf.seed": args.seed})
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import gen_synthetic

    seed = 0 if args.seed is None else args.seed
    if args.dump_config:
        print(f"category={args.category}\nn_normal={args.n_normal}\nn_abnormal={args.n_abnormal}\n"
              f"size={args.size}\nseed={seed}")
        return 0
    man = gen_synthetic(args.category, args.n_normal, args.n_abnormal, args.size, seed, args.out)
    print(f"wrote {len(man.records)} records to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import DatasetManifest
    from .model import ZeroShotDetector
    from .training import train, write_loss_csv

    cfg = _effective_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return 0
    manifest = DatasetManifest.load(args.train_manifest)
    model = ZeroShotDetector(cfg)
    before = model.frozen_digest()
    model, records, opt = train(model, manifest)
    if model.frozen_digest() != before:
        raise ZSADError("frozen encoder weights changed during training")
    out = Path(args.out_checkpoint)
    save_checkpoint(out, model, opt)
    loss_path = Path(args.out_loss) if args.out_loss else out.with_suffix(".loss.csv")
    write_loss_csv(records, loss_path)
    print(f"trained {len(records)} steps; checkpoint {out}; losses {loss_path}")
    return 0


def _load(args):
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        model.cfg = model.cfg.replace(**{"hsf.seed": args.seed})
    return model


def cmd_infer(args) -> int:
    from .data import load_pgm, save_pgm

    if args.dump_config:
        sys.stdout.write(_load(args).cfg.dumps())
        return 0
    model = _load(args)
    img = load_pgm(args.image)
    with torch.no_grad():
        out = model(img, args.category)
    save_pgm(out.aggregated_map.numpy(), args.out_map)
    line = "%.6f" % float(out.image_score)
    print(line)
    if args.out_score:
        Path(args.out_score).write_text(line + "\n", encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .evaluation import evaluate, format_report, write_report

    model = _load(args)
    if args.dump_config:
        sys.stdout.write(model.cfg.dumps())
        return 0
    seed = model.cfg.hsf.seed if args.seed is None else args.seed
    report = evaluate(model, DatasetManifest.load(args.test_manifest), seed=seed,
                      noise_sigma=args.noise_sigma, image_score=args.image_score)
    txt, js = write_report(report, args.out_report)
    sys.stdout.write(format_report(report))
    print(f"wrote {txt} and {js}")
    return 0


def gradcheck(seed: int = 0, size: int = 32, per_tensor: int = 12, config: RunConfig | None = None) -> dict[str, float]:
    """Max relative error between autograd and central differences, per trainable tensor.

    The loss is the full training objective on one seeded defective image.
    Trainable tensors are first moved off their initial values (the
    generator starts at zero) so every path carries gradient; ``per_tensor``
    seeded coordinates are checked in each tensor.
    """
    from .data import render_sample
    from .model import ZeroShotDetector
    from .numerics import finite_diff_check
    from .training import total_loss

    cfg = config or default_config()
    if size < cfg.encoder.patch_size:
        raise UsageError(f"--size {size} is smaller than one patch ({cfg.encoder.patch_size} px)")
    cfg = cfg.replace(**{"encoder.image_size": size, "seed": seed, "hsf.seed": seed})
    rng = np.random.default_rng(seed)
    img, mask = render_sample("squares", size, True, rng)
    img, mask = torch.as_tensor(img), torch.as_tensor(mask.astype(np.float64))
    model = ZeroShotDetector(cfg)
    params = model.trainable_parameters()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params.values():
            p.add_(0.02 * torch.randn(p.shape, generator=gen, dtype=p.dtype))

    def f():
        return total_loss(model(img, "squares"), mask, 1, cfg.train)

    errors = {}
    for name in sorted(params):
        p = params[name]
        coords = rng.choice(p.numel(), size=min(per_tensor, p.numel()), replace=False)
        errors[name] = finite_diff_check(f, p, GRADCHECK_STEP, coords=[int(c) for c in coords])
    return errors


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    cfg = load_config(args.config) if args.config else default_config()
    if args.size < cfg.encoder.patch_size:
        raise UsageError(f"--size {args.size} is smaller than one patch ({cfg.encoder.patch_size} px)")
    if args.dump_config:
        sys.stdout.write(cfg.replace(**{"encoder.image_size": args.size, "seed": seed}).dumps())
        return 0
    t = time.perf_counter()
    errors = gradcheck(seed, args.size, args.per_tensor, cfg)
    for name, err in errors.items():
        print(f"{name:<40}{err:.3e}")
    worst = max(errors.values())
    ok = worst <= GRADCHECK_TOL
    print(f"max relative error {worst:.6e} ({'PASS' if ok else 'FAIL'}, tol {GRADCHECK_TOL:g}, "
          f"{time.perf_counter() - t:.1f}s)")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zsad", description="Zero-shot anomaly detection with hybrid prompts.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-data", parents=[common], help="render a synthetic labelled dataset",
        description="Render seeded shape images (squares, disks or bars; gray 0.4 background, 0.75 shapes, "
        "Gaussian pixel noise sigma 0.05). Defective images carry one irregular blob 3-8 px across, painted "
        "0.05 on bright regions and 0.95 on dark ones; its footprint is the mask.",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--n-normal", type=int, required=True)
    p.add_argument("--n-abnormal", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train prompts and projection")
    p.add_argument("--config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-loss", help="loss CSV (default: <checkpoint>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="anomaly map and score for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-score")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="image and pixel metrics on a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out-report", required=True, help="directory, or a file stem for .txt/.json")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--image-score", choices=("hsf", "max"), default="hsf")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="autograd vs finite differences on the full loss")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--config")
    p.add_argument("--per-tensor", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"zsad {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ZSADError, OSError) as exc:
        print(f"zsad {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
