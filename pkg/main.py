"""Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

# Ensure src is importable
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import config  # noqa: E402
from src.baselines import train_and_infer_baseline  # noqa: E402
from src.dataset import SPLITS, load_dataset, save_dataset  # noqa: E402
from src.diffusion import NoiseSchedule  # noqa: E402
from src.errors import ConfigError  # noqa: E402
from src.experiment import ExperimentConfig, echo_config, load_experiment, parse_override, to_dict  # noqa: E402
from src.inference import inference_options, load_scores, record_threshold, run_inference, save_scores  # noqa: E402
from src.metrics import MetricsReport, evaluate, select_threshold, write_report  # noqa: E402
from src.phantom import PhantomSpec, generate_phantom  # noqa: E402
from src.trainer import trainer_from_config  # noqa: E402
from src.unet import load_checkpoint  # noqa: E402
from src.utils import seed_everything, slice_name  # noqa: E402
from src.visualize import save_case_figure  # noqa: E402
from src.volume_processor import VolumeProcessor  # noqa: E402

logger = logging.getLogger("mmccd")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _load_split(cfg: ExperimentConfig, split: str) -> list:
    if not (cfg.dataset_path / "manifest.jsonl").exists():
        raise ConfigError(f"No dataset at {cfg.dataset_path}; run generate-data first.")
    return load_dataset(cfg.dataset_path, split)


def _load_scores(cfg: ExperimentConfig, split: str) -> list:
    if not (cfg.output_path / f"scores_{split}.jsonl").exists():
        raise ConfigError(f"No {split} scores under {cfg.output_path}; run infer --split {split} first.")
    return load_scores(cfg.output_path, split)


def _matched(cfg: ExperimentConfig, split: str) -> tuple:
    """Score results and their slice pairs, matched by slice name."""
    by_name = {p.name: p for p in _load_split(cfg, split)}
    results, pairs = [], []
    for row, result in _load_scores(cfg, split):
        name = slice_name(row["subject_id"], row["slice_index"])
        if name not in by_name:
            raise ConfigError(f"Score map {row['path']} has no slice {name} in the {split} dataset.")
        results.append(result)
        pairs.append(by_name[name])
    return results, pairs


def cmd_generate_data(cfg: ExperimentConfig) -> Path:
    """Phantom generation or BraTS ingestion into the dataset directory."""
    if cfg.data.source == "phantom":
        spec = PhantomSpec(
            modality_x=cfg.modality_x,
            modality_y=cfg.phantom_modality_y(),
            image_size=cfg.data.image_size,
            noise_sigma=cfg.data.noise_sigma,
            anomaly_modes=tuple(cfg.data.anomaly_modes),
            seed=cfg.seed,
        )
        counts = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
        pairs = [p for split in SPLITS for p in generate_phantom(spec, counts[split], split)]
    else:
        processor = VolumeProcessor(
            cfg.modality_x,
            cfg.phantom_modality_y(),
            slice_range=tuple(cfg.data.slice_range),
            target=cfg.data.image_size,
            workers=cfg.workers,
        )
        pairs = processor.process_directory(cfg.data.brats_dir, seed=cfg.seed)
    digest = save_dataset(pairs, cfg.dataset_path)
    logger.info("Dataset ready at %s (%d slices, digest %s)", cfg.dataset_path, len(pairs), digest)
    return cfg.dataset_path


def cmd_train(cfg: ExperimentConfig) -> Path:
    trainer = trainer_from_config(cfg, _load_split(cfg, "train"))
    return trainer.run(resume=cfg.train.resume)


def cmd_infer(cfg: ExperimentConfig, checkpoint=None, split: str = "test") -> Path:
    """Score one split with a trained checkpoint; writes score maps and their manifest."""
    path = Path(checkpoint) if checkpoint else cfg.checkpoint_dir / "latest.pt"
    if not path.exists():
        raise ConfigError(f"Checkpoint {path} not found; run train first or pass --checkpoint.")
    payload = load_checkpoint(path, device=cfg.device)
    if payload["method"] != cfg.method:
        raise ConfigError(f"Checkpoint {path} was trained for {payload['method']!r}, not {cfg.method!r}.")
    schedule = NoiseSchedule.from_descriptor(payload["schedule"]) if payload["schedule"] else None
    pairs = _load_split(cfg, split)
    results = run_inference(
        cfg.method, payload["networks"], pairs, cfg.seed, cfg.device, **inference_options(cfg, schedule)
    )
    return save_scores(results, pairs, cfg.output_path, split)


def cmd_evaluate(cfg: ExperimentConfig, split: str = "test") -> MetricsReport:
    """Metrics at a fixed h or at the h selected on validation scores."""
    results, pairs = _matched(cfg, split)
    source = cfg.evaluation.threshold_source
    if source == "from_validation":
        val_results, val_pairs = _matched(cfg, "val")
        threshold = select_threshold(
            [r.anomaly_score.numpy() for r in val_results],
            [p.anomaly_gt for p in val_pairs],
            cfg.evaluation.sweep_points,
            tuple(cfg.evaluation.percentiles),
        )
    else:
        threshold = cfg.evaluation.threshold
    report = evaluate(
        [r.anomaly_score.numpy() for r in results],
        [p.anomaly_gt for p in pairs],
        threshold,
        cfg.method_label,
        source,
        to_dict(cfg),
    )
    write_report(report, cfg.report_file, cfg.output_path / "metrics.json")
    record_threshold(cfg.output_path, split, threshold)
    return report


def cmd_run_all(cfg: ExperimentConfig) -> MetricsReport:
    """Data, training, validation-driven threshold and test metrics in one go."""
    if not (cfg.dataset_path / "manifest.jsonl").exists():
        cmd_generate_data(cfg)
    if cfg.method in config.TRANSLATION_METHODS:
        cmd_train(cfg)
        if cfg.evaluation.threshold_source == "from_validation":
            cmd_infer(cfg, split="val")
        cmd_infer(cfg, split="test")
        return cmd_evaluate(cfg)

    data = {split: _load_split(cfg, split) for split in SPLITS}
    outcome = train_and_infer_baseline(cfg.method, cfg, data)
    save_scores(outcome.test_results, data["test"], cfg.output_path, "test")
    (cfg.output_path / "baseline_sweep.json").write_text(
        json.dumps({"chosen": outcome.params, "threshold": outcome.threshold, "sweep": outcome.sweep}, indent=2),
        encoding="utf-8",
    )
    report = evaluate(
        [r.anomaly_score.numpy() for r in outcome.test_results],
        [p.anomaly_gt for p in data["test"]],
        outcome.threshold,
        cfg.method_label,
        "from_validation",
        dict(to_dict(cfg), baseline=outcome.params),
    )
    write_report(report, cfg.report_file, cfg.output_path / "metrics.json")
    return report


def cmd_visualize(cfg: ExperimentConfig, split: str = "test", limit: int = 8) -> list:
    results, pairs = _matched(cfg, split)
    out = cfg.output_path / "figures" / split
    return [
        save_case_figure(pair, result, out / f"{pair.name}.png", title=f"{cfg.method_label}: {pair.name}")
        for result, pair in list(zip(results, pairs))[:limit]
    ]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML experiment file")
    common.add_argument("--method", type=str, choices=config.METHODS, default=None)
    common.add_argument("--modality-x", type=str, choices=config.MODALITIES, default=None)
    common.add_argument("--modality-y", type=str, choices=config.MODALITIES, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--output-dir", type=str, default=None)
    common.add_argument("--brats-dir", type=str, default=None, help="ingest BraTS volumes instead of the phantom")
    common.add_argument("--max-steps", type=int, default=None)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="e.g. --set sampler.kind=ddpm")
    common.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="mmccd", description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate-data", parents=[common], help="build the phantom or ingest BraTS")
    train = commands.add_parser("train", parents=[common], help="train the configured method")
    train.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    infer = commands.add_parser("infer", parents=[common], help="write anomaly score maps")
    infer.add_argument("--checkpoint", type=str, default=None)
    infer.add_argument("--split", type=str, choices=SPLITS, default="test")
    evaluate_cmd = commands.add_parser("evaluate", parents=[common], help="metrics report")
    evaluate_cmd.add_argument("--threshold-source", type=str, choices=["fixed", "from_validation"], default=None)
    evaluate_cmd.add_argument("--threshold", type=float, default=None)
    evaluate_cmd.add_argument("--split", type=str, choices=SPLITS, default="test")
    commands.add_parser("run-all", parents=[common], help="generate, train, infer and evaluate")
    visualize = commands.add_parser("visualize", parents=[common], help="case figures from saved scores")
    visualize.add_argument("--split", type=str, choices=SPLITS, default="test")
    visualize.add_argument("--limit", type=int, default=8)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "method": args.method,
        "modality_x": args.modality_x,
        "modality_y": args.modality_y,
        "seed": args.seed,
        "output_dir": args.output_dir,
        "train.max_steps": args.max_steps,
    }
    if args.brats_dir:
        overrides.update({"data.source": "brats_dir", "data.brats_dir": args.brats_dir})
    if getattr(args, "resume", False):
        overrides["train.resume"] = True
    if getattr(args, "threshold", None) is not None:
        overrides.update({"evaluation.threshold": args.threshold, "evaluation.threshold_source": "fixed"})
    if getattr(args, "threshold_source", None):
        overrides["evaluation.threshold_source"] = args.threshold_source
    for item in args.set:
        key, value = parse_override(item)
        overrides[key] = value
    return load_experiment(args.config, overrides)


def run_command(cfg: ExperimentConfig, args: argparse.Namespace):
    if args.command == "generate-data":
        return cmd_generate_data(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "infer":
        return cmd_infer(cfg, args.checkpoint, args.split)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.split)
    if args.command == "run-all":
        return cmd_run_all(cfg)
    return cmd_visualize(cfg, args.split, args.limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    try:
        echo_config(cfg)
        seed_everything(cfg.seed, cfg.deterministic)
        run_command(cfg, args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("%s failed: %s", args.command, e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
