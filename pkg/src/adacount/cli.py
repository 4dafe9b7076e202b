"""Command-line surface wiring datasets -> trainer -> metrics.

Subcommands: train, eval, predict, render-density, synth, patches,
composite. Exit codes: 0 success, 1 usage error, 2 runtime error or
training divergence. ``ADACOUNT_RUN_ROOT`` sets the default root for run
directories and evaluation ledgers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from adacount import datasets as ds
from adacount import metrics as metrics_mod
from adacount import trainer as trainer_mod
from adacount.config import TrainConfig
from adacount.core import DomainTag
from adacount.density import count_from_density, render_density
from adacount.objective import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

RUN_ROOT_ENV = "ADACOUNT_RUN_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # route argparse failures to exit code 1
        raise UsageError(message)


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _claim_out_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} exists and is not empty (pass --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _save_density(values: np.ndarray, out_dir: Path, stem: str) -> None:
    """Persist a map twice: exact array for metrics, scaled raster for eyes."""
    np.save(out_dir / f"{stem}.npy", values)
    peak = float(values.max())
    visual = values / peak if peak > 0 else values
    raster = np.round(np.clip(visual, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(raster, mode="L").save(out_dir / f"{stem}.png")


# ---------------------------------------------------------------------------
# Config resolution: flags > config file > defaults
# ---------------------------------------------------------------------------

_CONFIG_FLAGS = {
    "batch_size": int,
    "image_size": int,
    "lr_encoder_decoder": float,
    "lr_domain_head": float,
    "epochs": int,
    "val_fraction": float,
    "sigma": float,
    "gamma": float,
    "seed": int,
    "density_activation": str,
    "source_per_batch": int,
    "depth": int,
    "base_width": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    p.add_argument("--no-adapt", action="store_true", help="ablation baseline: no domain head")
    p.add_argument("--config", type=Path, default=None, help="JSON file of TrainConfig keys")


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if args.config is not None:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}")
    for name in _CONFIG_FLAGS:
        flag_value = getattr(args, name)
        if flag_value is not None:
            values[name] = flag_value
    if args.no_adapt:
        values["adaptation_enabled"] = False
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    source = ds.load_dataset_dir(args.source, DomainTag.SOURCE)
    target = None
    if cfg.adaptation_enabled:
        if args.target is None:
            raise UsageError("adaptation is enabled: pass --target or use --no-adapt")
        # target annotations, if present on disk, are for evaluation only
        target = ds.load_dataset(args.target / "images", None, DomainTag.TARGET)
    run_dir = args.run_dir or (_run_root() / f"run-{time.strftime('%Y%m%d-%H%M%S')}")
    _claim_out_dir(run_dir, args.force)
    state = trainer_mod.train(source, target, cfg, run_dir)
    print(f"run directory: {run_dir}")
    print(f"epochs: {len(state.history)}  best_val_loss: {state.best_val_loss:.6g}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    data = ds.load_dataset_dir(args.data, args.domain)
    unlabeled = [s.image.id for s in data if not s.labeled]
    if unlabeled:
        raise UsageError(
            f"evaluation dataset must be fully annotated; unlabeled: {', '.join(unlabeled[:5])}"
        )
    truth = [s.dots.count() for s in data]

    if args.predictions is not None:
        pred_by_id = _read_predictions(args.predictions)
        missing = [s.image.id for s in data if s.image.id not in pred_by_id]
        if missing:
            raise UsageError(f"predictions file lacks ids: {', '.join(missing[:5])}")
        pred = [pred_by_id[s.image.id] for s in data]
        context = {"predictions": str(args.predictions), "dataset": data.name}
    else:
        if args.checkpoint is None:
            raise UsageError("pass --checkpoint or --predictions")
        model, cfg = trainer_mod.load_model(args.checkpoint)
        if args.image_size is not None and args.image_size != cfg.image_size:
            raise UsageError(
                f"--image-size {args.image_size} conflicts with checkpoint config "
                f"image_size {cfg.image_size}"
            )
        size = None if args.native else cfg.image_size
        pred = [c for _, c in trainer_mod.predict(model, [s.image for s in data], size)]
        context = {"checkpoint": str(args.checkpoint), "dataset": data.name}

    report = metrics_mod.compute_metrics(pred, truth)
    print(report.to_text())
    ledger = args.ledger or (_run_root() / "evaluations.jsonl")
    metrics_mod.append_to_ledger(report, ledger, context)
    print(f"appended to {ledger}")
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, float]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != ["image_id", "count"]:
        raise UsageError(f"{path}: expected header 'image_id,count'")
    out: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [c.strip() for c in line.split(",")]
        if len(parts) != 2:
            raise UsageError(f"{path}:{lineno}: expected 'image_id,count', got {line!r}")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise UsageError(f"{path}:{lineno}: non-numeric count in {line!r}")
    return out


def cmd_predict(args: argparse.Namespace) -> int:
    model, cfg = trainer_mod.load_model(args.checkpoint)
    data = ds.load_dataset(args.images, None, DomainTag.TARGET)
    out_dir = _claim_out_dir(args.out, args.force)
    size = None if args.native else cfg.image_size
    results = trainer_mod.predict(model, [s.image for s in data], size)
    rows = ["image_id,count"]
    for s, (dmap, count) in zip(data, results):
        _save_density(np.asarray(dmap.values), out_dir, f"{s.image.id}_density")
        rows.append(f"{s.image.id},{count!r}")
    (out_dir / "counts.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(results)} density maps and counts.csv to {out_dir}")
    return EXIT_OK


def cmd_render_density(args: argparse.Namespace) -> int:
    if args.sigma <= 0:
        raise UsageError(f"--sigma must be > 0, got {args.sigma}")
    data = ds.load_dataset_dir(args.data, args.domain)
    out_dir = _claim_out_dir(args.out, args.force)
    rows = ["image_id,count,density_sum"]
    for s in data:
        if not s.labeled:
            raise UsageError(f"image {s.image.id!r} has no annotations to render")
        dmap = render_density(s.dots, s.image.height, s.image.width, args.sigma)
        _save_density(np.asarray(dmap.values), out_dir, f"{s.image.id}_density")
        rows.append(f"{s.image.id},{s.dots.count()},{count_from_density(dmap)!r}")
    (out_dir / "sums.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"rendered {len(data)} density maps to {out_dir}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        spec = ds.SyntheticSpec(
            image_size=args.image_size,
            min_count=args.min_count,
            max_count=args.max_count,
            blob_radius=args.blob_radius,
            shift_strength=args.shift,
            noise_level=args.noise_level,
            n_source=args.n_source,
            n_target=args.n_target,
            n_test=args.n_test,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    out_dir = _claim_out_dir(args.out, args.force)
    source, target, test = ds.generate_synthetic(spec, args.seed)
    ds.save_dataset(source, out_dir / "source", force=True)
    ds.save_dataset(target, out_dir / "target", force=True)
    ds.save_dataset(test, out_dir / "target_test", force=True)
    print(f"wrote source ({len(source)}), target ({len(target)}), target_test ({len(test)}) under {out_dir}")
    return EXIT_OK


def cmd_patches(args: argparse.Namespace) -> int:
    data = ds.load_dataset_dir(args.data, args.domain)
    try:
        patched = ds.extract_patches(data, args.patch, args.count, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    out_dir = _claim_out_dir(args.out, args.force)
    ds.save_dataset(patched, out_dir, force=True)
    print(f"wrote {len(patched)} patches to {out_dir}")
    return EXIT_OK


def cmd_composite(args: argparse.Namespace) -> int:
    data = ds.load_dataset_dir(args.data, args.domain)
    try:
        composites = ds.make_composites(data, args.count, args.seed, grid=args.grid)
    except ValueError as exc:
        raise UsageError(str(exc))
    out_dir = _claim_out_dir(args.out, args.force)
    ds.save_dataset(composites, out_dir, force=True)
    print(f"wrote {len(composites)} composites to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _domain_arg(value: str) -> DomainTag:
    try:
        return DomainTag(value)
    except ValueError:
        raise UsageError(f"domain must be 'source' or 'target', got {value!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="adacount", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a counting model")
    p.add_argument("--source", type=Path, required=True, help="source dataset directory")
    p.add_argument("--target", type=Path, default=None, help="target dataset directory")
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate counts against an annotated dataset")
    p.add_argument("--data", type=Path, required=True, help="annotated dataset directory")
    p.add_argument("--domain", type=_domain_arg, default=DomainTag.TARGET)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--predictions", type=Path, default=None, help="CSV of image_id,count")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--native", action="store_true", help="predict at native resolution")
    p.add_argument("--ledger", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write density maps and counts for a directory of images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--native", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render-density", help="render ground-truth density maps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--domain", type=_domain_arg, default=DomainTag.SOURCE)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render_density)

    p = sub.add_parser("synth", help="generate the synthetic domain-shift benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--shift", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--max-count", type=int, default=12)
    p.add_argument("--blob-radius", type=float, default=5.0)
    p.add_argument("--noise-level", type=float, default=0.02)
    p.add_argument("--n-source", type=int, default=200)
    p.add_argument("--n-target", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patches", help="extract random square patches")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--domain", type=_domain_arg, default=DomainTag.TARGET)
    p.add_argument("--patch", type=int, default=512)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("composite", help="stitch grid composites")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--domain", type=_domain_arg, default=DomainTag.TARGET)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--grid", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_composite)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
