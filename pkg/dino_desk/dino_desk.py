#!/usr/bin/env python3
"""Command-line front end: train, distill, evaluate, analyze and info."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Final

import torch

from dino_desk.attention import T_HIGH, T_LOW, analyze_images
from dino_desk.config import (
    AccelConfig,
    TrainConfig,
    check_compatible,
    dump_train_config,
    parse_accel_config,
    parse_train_config,
    parse_train_config_data,
)
from dino_desk.data import LabeledSample, load_dataset, read_manifest
from dino_desk.distill import DistillTrainer
from dino_desk.errors import ConfigError, DinoDeskError
from dino_desk.evaluation import (
    EMBEDDINGS_FILE,
    extract_embeddings,
    knn_classify,
    linear_probe,
    write_embeddings,
    write_report_csv,
)
from dino_desk.layout import RunLayout, create_run_layout, open_run_layout
from dino_desk.trainer import DinoTrainer, apply_peft, build_student, load_backbone
from dino_desk.utils import logger, settings
from dino_desk.vit import VisionTransformer, parameter_counts

EXIT_OK: Final = 0
EXIT_CONFIG: Final = 2
EXIT_RUNTIME: Final = 3
DEFAULT_RUNS_DIR: Final = Path("runs")
CONFIG_COPY: Final = "train_config.yaml"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dino_desk", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser, *, accel: bool = False) -> None:
        sub.add_argument("--train-config", type=Path, required=True, help="Training YAML file.")
        if accel:
            sub.add_argument("--accel-config", type=Path, help="Accelerator YAML file.")
        sub.add_argument("--seed", type=int, help="Override train.seed.")
        sub.add_argument("--output-dir", type=Path, help="Run directory.")

    for name in ("train", "distill"):
        sub = commands.add_parser(name, help=f"Run the {name} loop.")
        add_common(sub, accel=True)
        sub.add_argument("--resume-from", type=Path, help="Checkpoint directory to continue from.")
        sub.add_argument("--force", action="store_true", help="Replace an existing run directory.")

    evaluate = commands.add_parser("evaluate", help="kNN and linear probe on frozen embeddings.")
    add_common(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--eval-manifest", type=Path, help="Held-out set; defaults to the train set.")
    evaluate.add_argument("--k", type=int, default=5)
    evaluate.add_argument("--role", choices=("teacher", "student"), help="Encoder to evaluate.")

    analyze = commands.add_parser("analyze", help="CLS-attention detection pipeline.")
    add_common(analyze)
    analyze.add_argument("--checkpoint", type=Path, required=True)
    analyze.add_argument("--manifest", type=Path, help="Images (and ROIs) to analyse.")
    analyze.add_argument("--components", type=int, default=1)
    analyze.add_argument("--t-low", type=float, default=T_LOW)
    analyze.add_argument("--t-high", type=float, default=T_HIGH)
    analyze.add_argument("--role", choices=("teacher", "student"), help="Encoder to analyse.")

    info = commands.add_parser("info", help="Print the parsed config and parameter counts.")
    info.add_argument("--train-config", type=Path, required=True)
    info.add_argument("--accel-config", type=Path)
    return parser


def _override(config: TrainConfig, **train_updates: Any) -> TrainConfig:
    updates = {key: value for key, value in train_updates.items() if value is not None}
    if not updates:
        return config
    data = config.model_dump(mode="json")
    data["train"] |= updates
    return parse_train_config_data(data, "command line")


def _load_config(args: argparse.Namespace, **train_updates: Any) -> TrainConfig:
    return _override(parse_train_config(args.train_config), seed=getattr(args, "seed", None), **train_updates)


def _load_accel(args: argparse.Namespace) -> AccelConfig:
    return parse_accel_config(args.accel_config) if args.accel_config is not None else AccelConfig()


def _load_samples(manifest: Path) -> list[LabeledSample]:
    return load_dataset(read_manifest(manifest))


def _run_root(args: argparse.Namespace, config: TrainConfig) -> Path:
    if args.output_dir is not None:
        return args.output_dir
    return DEFAULT_RUNS_DIR / config.train.model_name


def _checkpoint_root(checkpoint: Path, output_dir: Path | None) -> RunLayout:
    # iter_N bundles live in <run>/checkpoints/
    root = output_dir if output_dir is not None else checkpoint.resolve().parent.parent
    return open_run_layout(root)


def run_training(args: argparse.Namespace, *, distill: bool) -> int:
    """Parse both configs, prepare the run directory and train (or resume)."""
    if args.force and args.resume_from is not None:
        raise ConfigError("--force and --resume-from cannot be combined.")
    config = _load_config(args, do_distillation=True if distill else None)
    accel = _load_accel(args)
    check_compatible(config, accel)
    samples = _load_samples(config.dataset.dataset_path)
    if args.resume_from is not None:
        layout = _checkpoint_root(args.resume_from, args.output_dir)
    else:
        layout = create_run_layout(_run_root(args, config), force=args.force)
        (layout.root / CONFIG_COPY).write_text(dump_train_config(config), encoding="utf-8")
    trainer_class = DistillTrainer if config.train.do_distillation else DinoTrainer
    trainer = trainer_class(config, accel, samples, layout)
    if args.resume_from is not None:
        trainer.resume(args.resume_from)
    trainer.fit()
    logger.info("Run finished in %s.", layout.root)
    return EXIT_OK


def _encoder(args: argparse.Namespace, config: TrainConfig) -> VisionTransformer:
    role = args.role or ("student" if config.train.do_distillation else "teacher")
    return load_backbone(args.checkpoint, config, role=role)


def run_evaluation(args: argparse.Namespace) -> int:
    """kNN and linear probe on frozen CLS embeddings of a checkpoint."""
    config = _load_config(args)
    layout = _checkpoint_root(args.checkpoint, args.output_dir)
    backbone = _encoder(args, config)
    dataset = config.dataset
    stats = {"normalization": dataset.normalization, "mean": dataset.mean, "std": dataset.std}
    train = extract_embeddings(backbone, _load_samples(dataset.dataset_path), **stats)
    if not 1 <= args.k <= len(train):
        raise ConfigError(f"--k must be between 1 and the {len(train)} training embeddings, got {args.k}.")
    write_embeddings(layout.results / EMBEDDINGS_FILE, train)
    if args.eval_manifest is not None:
        test = extract_embeddings(backbone, _load_samples(args.eval_manifest), **stats)
        write_embeddings(layout.results / f"eval_{EMBEDDINGS_FILE}", test)
        name = args.eval_manifest.stem
    else:
        test, name = train, Path(dataset.dataset_path).stem
    reports = [
        knn_classify(train, test, args.k, dataset=name),
        linear_probe(train, test, dataset=name),
    ]
    path = write_report_csv(layout.results / "eval_report.csv", reports)
    logger.info("Wrote %s (precision and F1 are macro averages).", path)
    return EXIT_OK


def run_analysis(args: argparse.Namespace) -> int:
    """Attention heatmaps, detections and detection scores for a checkpoint."""
    config = _load_config(args)
    layout = _checkpoint_root(args.checkpoint, args.output_dir)
    backbone = _encoder(args, config)
    dataset = config.dataset
    manifest = args.manifest if args.manifest is not None else dataset.dataset_path
    analyze_images(
        backbone,
        _load_samples(manifest),
        n_components=args.components,
        t_low=args.t_low,
        t_high=args.t_high,
        normalization=dataset.normalization,
        mean=dataset.mean,
        std=dataset.std,
        samples_dir=layout.samples,
        results_dir=layout.results,
    )
    return EXIT_OK


def run_info(args: argparse.Namespace) -> int:
    """Print the parsed config and parameter counts; touches no file."""
    config = parse_train_config(args.train_config)
    accel = _load_accel(args)
    model = apply_peft(build_student(config), config)
    total, trainable = parameter_counts(model)
    sys.stdout.write(dump_train_config(config))
    sys.stdout.write(
        f"# variant: {config.variant}\n"
        f"# augmentation: {config.augmentation_domain}\n"
        f"# distribution: {accel.distribution.type} x {accel.distribution.num_workers}\n"
        f"# parameters: {total} total, {trainable} trainable\n"
    )
    return EXIT_OK


def run_command(argv: Sequence[str]) -> int:
    """Dispatch one command line and map failures onto exit codes."""
    try:
        args = build_parser().parse_args(list(argv))
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_CONFIG
    try:
        match args.command:
            case "train":
                return run_training(args, distill=False)
            case "distill":
                return run_training(args, distill=True)
            case "evaluate":
                return run_evaluation(args)
            case "analyze":
                return run_analysis(args)
            case _:
                return run_info(args)
    except ConfigError as err:
        logger.error("Configuration error: %s", err)  # noqa: TRY400
        return EXIT_CONFIG
    except (DinoDeskError, OSError, ValueError) as err:
        logger.error("%s failed: %s", args.command, err)  # noqa: TRY400
        return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    """Apply runtime settings and run one command."""
    if settings.TORCH_THREADS is not None:
        torch.set_num_threads(settings.TORCH_THREADS)
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
