import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from src.experiment import ExperimentConfig
from src.inference import InferenceResult, inference_options, run_inference
from src.metrics import mean_dice, select_threshold
from src.trainer import trainer_from_config

logger = logging.getLogger(__name__)

VARIANTS = {"AE": "ae", "VAE": "vae", "DAE": "dae", "DDPM_UNCOND": "ddpm_uncond"}


@dataclass
class BaselineOutcome:
    method: str
    params: dict
    threshold: float
    val_dice: float
    checkpoint: Path
    test_results: list = field(default_factory=list)
    sweep: list = field(default_factory=list)


def _method(variant: str) -> str:
    key = variant.upper()
    if key in VARIANTS:
        return VARIANTS[key]
    if variant in VARIANTS.values():
        return variant
    raise ValueError(f"Unknown baseline {variant!r}; expected one of {list(VARIANTS)}.")


def training_candidates(method: str, cfg: ExperimentConfig) -> list[dict]:
    """Trainer keyword settings to compare; one entry when the sweep is off."""
    sweep = cfg.evaluation.baseline_sweep
    if method == "dae":
        sigmas = cfg.evaluation.dae_sigmas if sweep else [cfg.train.dae_sigma]
        return [{"noise_sigma": float(s)} for s in sigmas]
    if method == "vae":
        weights = cfg.evaluation.vae_kl_weights if sweep else [cfg.train.vae_kl_weight]
        return [{"kl_weight": float(w)} for w in weights]
    return [{}]


def t_test_candidates(cfg: ExperimentConfig) -> list[int]:
    T = cfg.schedule.T
    if not cfg.evaluation.baseline_sweep:
        return [cfg.sampler.resolved_t_test(T)]
    return sorted({min(T, max(1, int(round(f * T)))) for f in cfg.evaluation.t_test_fractions})


def _tag(params: dict) -> str:
    return "_".join(f"{k}-{v:g}" for k, v in sorted(params.items())) or "default"


def _score(results: list[InferenceResult], pairs: list) -> tuple:
    scores = [r.anomaly_score.numpy() for r in results]
    gts = [p.anomaly_gt for p in pairs]
    return scores, gts


def train_and_infer_baseline(variant: str, cfg: ExperimentConfig, data: dict) -> BaselineOutcome:
    """Train on ``data['train']``, pick settings and h on ``data['val']``, score ``data['test']``."""
    method = _method(variant)
    cfg = replace(cfg, method=method)
    for split in ("train", "val", "test"):
        if split not in data:
            raise ValueError(f"Baseline {method} needs a {split!r} split.")
    if not data["val"]:
        raise ValueError(f"Baseline {method} needs validation slices to choose its settings.")

    sweep, best = [], None
    for params in training_candidates(method, cfg):
        trainer = trainer_from_config(cfg, data["train"], cfg.output_path / "sweep" / _tag(params), **params)
        checkpoint = trainer.run(resume=cfg.train.resume)
        networks = trainer.networks
        for t_test in (t_test_candidates(cfg) if method == "ddpm_uncond" else [None]):
            options = inference_options(cfg, trainer.schedule, t_test=t_test)
            val = run_inference(method, networks, data["val"], cfg.seed, cfg.device, **options)
            scores, gts = _score(val, data["val"])
            h = select_threshold(scores, gts, cfg.evaluation.sweep_points, tuple(cfg.evaluation.percentiles))
            val_dice = mean_dice(scores, gts, h)
            candidate = dict(params, **({"t_test": t_test} if t_test else {}))
            sweep.append({"params": candidate, "threshold": h, "val_dice": val_dice})
            logger.info("%s %s: validation Dice %.4f at h=%.4g", method, candidate, val_dice, h)
            if best is None or val_dice > best[0]:
                best = (val_dice, candidate, h, checkpoint, networks, options)

    val_dice, params, h, checkpoint, networks, options = best
    options["threshold"] = h
    test = run_inference(method, networks, data["test"], cfg.seed, cfg.device, **options)
    logger.info("%s chose %s (validation Dice %.4f, h=%.4g)", method, params, val_dice, h)
    return BaselineOutcome(
        method=method,
        params=params,
        threshold=h,
        val_dice=float(val_dice),
        checkpoint=checkpoint,
        test_results=test,
        sweep=sweep,
    )
