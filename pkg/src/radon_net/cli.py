"""Command line entry point: ``radon-net <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig
from .dataset import (
    DatasetError,
    ImageCache,
    load_image,
    load_index,
    make_synthetic,
    split_classes,
    write_manifest,
    write_run_metadata,
)
from .evaluation import SCENARIOS, EvaluationError, PairScorer, evaluate, score_matrix
from .model import ConfigError, build_model, default_layer_map, load_weights, score_arrays, transplant_weights
from .training import TrainingError, train
from .weights import WeightFormatError, load_container

log = logging.getLogger("radon_net")


class UsageError(Exception):
    """Bad arguments; maps to exit code 2."""


# ------------------------------------------------------------- commands


def cmd_make_synthetic(args) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    if args.per_class < 1:
        raise UsageError(f"--per-class must be >= 1, got {args.per_class}")
    manifest = make_synthetic(args.out, args.classes, args.per_class, args.seed, size=args.size)
    write_run_metadata(Path(args.out) / "synthetic.json", classes=args.classes, per_class=args.per_class,
                       seed=args.seed, size=args.size)
    print(manifest)
    return 0


def cmd_split(args) -> int:
    index = load_index(args.manifest)
    n = len(index.classes)
    if not 0 < args.novel < n:
        raise UsageError(f"--novel must be between 1 and {n - 1} for {n} classes, got {args.novel}")
    index = split_classes(index, args.novel, args.seed)
    write_manifest(index, args.manifest)
    manifest = Path(args.manifest)
    write_run_metadata(manifest.with_name(manifest.stem + ".split.json"), novel_count=args.novel, seed=args.seed,
                       known=len(index.known_classes), novel=len(index.novel_classes))
    print(f"{len(index.known_classes)} known / {len(index.novel_classes)} novel -> {manifest}")
    return 0


def _train_config(args) -> RunConfig:
    overrides = {
        "manifest": args.manifest,
        "out": args.out,
        "epochs": args.epochs,
        "init_weights": args.init_weights,
        "model.mode": args.mode,
        "model.seed": args.seed,
        "sampler.seed": args.seed,
        "sampler.batch_size": args.batch_size,
        "sampler.pairs_per_epoch": args.pairs_per_epoch,
        "optimizer.lr": args.lr,
    }
    cfg = RunConfig.load(args.config, overrides)
    manifest = cfg.require("manifest")
    if not Path(manifest).is_file():
        raise ConfigError(f"config key 'manifest': file not found: {manifest}")
    init = cfg.data["init_weights"]
    if init and not Path(init).is_file():
        raise ConfigError(f"config key 'init_weights': file not found: {init}")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(cfg.data["out"])
    out.mkdir(parents=True, exist_ok=True)
    index = load_index(cfg.data["manifest"])
    model = build_model(cfg.layers, cfg.input_shape, cfg.data["model"]["mode"], cfg.data["model"]["seed"],
                        freeze_mask=cfg.data["model"]["freeze"])
    if cfg.data["init_weights"]:
        donor = load_container(cfg.data["init_weights"])
        layer_map = cfg.data["layer_map"] or default_layer_map(model, donor)
        rep = transplant_weights(model, donor, layer_map)
        log.info("transplanted %s; kept init for %s", rep.transplanted, rep.skipped)
        write_run_metadata(out / "transplant.json", source=cfg.data["init_weights"], layer_map=layer_map,
                           transplanted=rep.transplanted, skipped=rep.skipped)
    cfg.write(out / "config.json")
    loader = ImageCache(index, cfg.preprocess)
    t0 = time.perf_counter()
    report = train(model, index, cfg.sampler, cfg.optimizer, cfg.data["epochs"], out, loader=loader,
                   config_echo=cfg.data)
    report.write(out / "train_report.json", timing=args.timing)
    if report.epoch_loss and not args.no_plots:
        from .plotting import plot_loss

        plot_loss(report.epoch_loss, out / "loss.svg", report.initial_batch_loss)
    log.info("training took %.1fs", time.perf_counter() - t0)
    print(out / (report.checkpoints[-1] if report.checkpoints else "train_report.json"))
    return 0


def _model_from_checkpoint(args) -> tuple[RunConfig, object]:
    config_path = args.config
    if config_path is None:
        guess = Path(args.checkpoint).parent / "config.json"
        if not guess.is_file():
            raise ConfigError(f"no --config given and no config.json beside {args.checkpoint}")
        config_path = str(guess)
    overrides = {"manifest": getattr(args, "manifest", None)}
    cfg = RunConfig.load(config_path, overrides)
    model = build_model(cfg.layers, cfg.input_shape, cfg.data["model"]["mode"], cfg.data["model"]["seed"])
    load_weights(model, args.checkpoint)
    return cfg, model


def _scenario_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in SCENARIOS]
    if bad or not names:
        raise UsageError(f"unknown scenario {bad[0] if bad else text!r}; choose from {','.join(SCENARIOS)}")
    return names


def cmd_eval(args) -> int:
    scenarios = _scenario_list(args.scenarios) if args.scenarios else None
    classes = [c.strip() for c in args.classes.split(",") if c.strip()] if args.classes else None
    if classes is not None and not args.matrix:
        raise UsageError("--classes only applies together with --matrix")
    cfg, model = _model_from_checkpoint(args)
    manifest = cfg.require("manifest")
    ev = cfg.data["eval"]
    scenarios = scenarios or ev["scenarios"]
    max_pairs = args.max_pairs if args.max_pairs is not None else ev["max_pairs"]
    seed = args.seed if args.seed is not None else ev["seed"]
    per_cell = args.samples_per_cell if args.samples_per_cell is not None else ev["samples_per_cell"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = load_index(manifest)
    loader = ImageCache(index, cfg.preprocess)
    scorer = PairScorer(model, loader)
    effective = dict(cfg.data)
    effective["eval"] = {"scenarios": scenarios, "max_pairs": max_pairs, "seed": seed, "samples_per_cell": per_cell}
    (out / "eval_config.json").write_text(
        json.dumps({"config": effective, "checkpoint": str(args.checkpoint)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    report = evaluate(model, index, scenarios, max_pairs, seed, out, loader, plots=not args.no_plots, scorer=scorer)
    for sc, entry in report.scenarios.items():
        print(f"{sc}: auc={entry['auc']:.6f} pos={entry['n_pos']} neg={entry['n_neg']}")
    if args.matrix:
        subset = classes or list(index.classes)
        sm = score_matrix(model, index, subset, per_cell, seed, loader, scorer=scorer)
        sm.write_csv(out / "score_matrix.csv")
        if not args.no_plots:
            from .plotting import plot_score_matrix

            plot_score_matrix(sm, out / "score_matrix.svg")
        print(f"score matrix: diagonal={sm.diagonal_mean():.4f} off-diagonal={sm.off_diagonal_mean():.4f}")
    return 0


def cmd_score(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0, 1], got {args.threshold}")
    cfg, model = _model_from_checkpoint(args)
    try:
        a = load_image(Path(args.image_a), cfg.preprocess)
        b = load_image(Path(args.image_b), cfg.preprocess)
    except OSError as exc:
        raise DatasetError(f"cannot read image: {exc}") from exc
    value = float(score_arrays(model, a.data[None], b.data[None])[0])
    decision = "match" if value >= args.threshold else "no match"
    print(f"score={value!r} decision={decision} threshold={args.threshold}")
    return 0


# --------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (tests use 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radon-net", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the two-domain glyph dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True, help="images per class per domain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="square image side in pixels")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("split", help="assign known/novel classes in a manifest (rewritten in place)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--novel", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on the known classes")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("tied", "untied"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pairs-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-weights", help="RDNW file to transplant into both branches")
    p.add_argument("--out")
    p.add_argument("--timing", action="store_true", help="record wall times in train_report.json")
    p.add_argument("--no-plots", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ROC per scenario and optional class score matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.json beside the checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--scenarios", help=f"comma list from {','.join(SCENARIOS)}")
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--matrix", action="store_true", help="also write the class score matrix")
    p.add_argument("--classes", help="comma list of classes for --matrix")
    p.add_argument("--samples-per-cell", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a single image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--image-a", required=True, help="domain-0 image (PGM/PPM)")
    p.add_argument("--image-b", required=True, help="domain-1 image (PGM/PPM)")
    p.add_argument("--threshold", type=float, default=0.5)
    _common(p)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"radon-net {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, EvaluationError, TrainingError, WeightFormatError, OSError, ValueError) as exc:
        print(f"radon-net {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
