import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

import config
from src.dataset import SlicePair, to_tensor
from src.diffusion import NoiseSchedule, build_schedule, gaussian_like, marginal_sample, sample_ddim, sample_ddpm
from src.experiment import ExperimentConfig
from src.masking import MaskSet, aggregate_anomaly, apply_mask_noise, build_mask_set
from src.unet import denoise_predict, predict_unconditional, translate
from src.utils import make_generator, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

COLLAPSE_TOLERANCE = 1e-6


@dataclass(eq=False)
class InferenceResult:
    """Anomaly score map of one slice with its threshold and binary segmentation."""

    anomaly_score: torch.Tensor
    threshold: float
    binary_mask: torch.Tensor
    per_mask_errors: Optional[list] = None
    forward_translation: Optional[torch.Tensor] = None
    reconstruction: Optional[torch.Tensor] = None
    collapsed: bool = False

    @classmethod
    def from_score(cls, score: torch.Tensor, threshold: float, **extra) -> "InferenceResult":
        score = score.detach().to("cpu", torch.float64)
        return cls(anomaly_score=score, threshold=float(threshold), binary_mask=score > threshold, **extra)

    def with_threshold(self, threshold: float) -> "InferenceResult":
        return replace(self, threshold=float(threshold), binary_mask=self.anomaly_score > threshold)


def pixel_error(a: torch.Tensor, b: torch.Tensor, mode: str = "squared") -> torch.Tensor:
    """Per-pixel translation error; squared by default, absolute behind the switch."""
    if a.shape != b.shape:
        raise ValueError(f"Cannot compare images of shapes {tuple(a.shape)} and {tuple(b.shape)}.")
    if mode == "squared":
        return (a - b) ** 2
    if mode == "absolute":
        return (a - b).abs()
    raise ValueError(f"Unknown error mode {mode!r}; expected 'squared' or 'absolute'.")


def is_collapsed(output: torch.Tensor, reference: torch.Tensor, tol: float = COLLAPSE_TOLERANCE) -> bool:
    """True when a translator handed back its input unchanged."""
    return bool((output - reference).abs().max() < tol)


def _as_batch(image: torch.Tensor) -> torch.Tensor:
    """(H, W), (1, H, W) or (1, 1, H, W) -> (1, 1, H, W)."""
    while image.dim() < 4:
        image = image.unsqueeze(0)
    if image.shape[:2] != (1, 1):
        raise ValueError(f"Expected a single 1-channel slice, got shape {tuple(image.shape)}.")
    return image


def check_sampler(sampler: str, s: NoiseSchedule, ddim_steps: Optional[int] = None) -> int:
    """Number of reverse steps the sampler will take; rejects settings the schedule cannot honor."""
    if sampler == "ddpm":
        return s.T
    if sampler != "ddim":
        raise ValueError(f"Unknown sampler {sampler!r}; expected 'ddpm' or 'ddim'.")
    steps = ddim_steps or max(1, s.T // config.DDIM_SPEEDUP)
    if not 1 <= steps <= s.T:
        raise ValueError(f"DDIM with {steps} steps is inconsistent with a {s.T}-step schedule.")
    return steps


@torch.no_grad()
def infer_mmccd(
    f: nn.Module,
    g: nn.Module,
    x: torch.Tensor,
    masks: MaskSet,
    s: NoiseSchedule,
    sampler: str = "ddim",
    ddim_steps: Optional[int] = None,
    threshold: float = config.DEFAULT_THRESHOLD,
    generator: Optional[torch.Generator] = None,
    beta_noise_scale: bool = False,
    error_mode: str = "squared",
    mask_batch_size: int = config.MASK_BATCH_SIZE,
    keep_per_mask_errors: bool = False,
) -> InferenceResult:
    """Masked cyclic translation of one slice x into a mask-averaged anomaly map."""
    n_steps = check_sampler(sampler, s, ddim_steps)
    x = _as_batch(x)
    if x.shape[-2:] != (masks.height, masks.width):
        raise ValueError(f"Slice {tuple(x.shape[-2:])} does not match the {masks.height}x{masks.width} mask set.")
    stack = masks.as_tensor().to(device=x.device, dtype=x.dtype)
    y_T = gaussian_like(x, generator)

    errors, translations, reconstructions = [], [], []
    for start in range(0, len(masks), mask_batch_size):
        m = stack[start:start + mask_batch_size].unsqueeze(1)
        b = m.shape[0]
        eps = torch.cat([gaussian_like(x, generator) for _ in range(b)])
        cond = apply_mask_noise(x.expand(b, -1, -1, -1), m, eps)

        def predict(y, t, cond=cond):
            return denoise_predict(f, y, cond, t)

        y_start = y_T.expand(b, -1, -1, -1).clone()
        if sampler == "ddim":
            y_bar = sample_ddim(predict, y_start, s, n_steps)
        else:
            y_bar = sample_ddpm(predict, y_start, s, generator, beta_noise_scale=beta_noise_scale)
        x_bar = translate(g, y_bar)
        errors.extend(pixel_error(x_bar, x.expand_as(x_bar), error_mode)[:, 0])
        translations.extend(y_bar[:, 0])
        reconstructions.extend(x_bar[:, 0])

    score = aggregate_anomaly(errors, masks)
    y_mean = aggregate_anomaly(translations, masks)
    x_mean = aggregate_anomaly(reconstructions, masks)
    collapsed = is_collapsed(x_mean, y_mean)
    if collapsed:
        logger.warning("Backward translator returned its input unchanged; the model looks collapsed.")
    return InferenceResult.from_score(
        score,
        threshold,
        per_mask_errors=[e.cpu() for e in errors] if keep_per_mask_errors else None,
        forward_translation=y_mean.cpu(),
        reconstruction=x_mean.cpu(),
        collapsed=collapsed,
    )


@torch.no_grad()
def infer_cyclic_unet(
    f: nn.Module,
    g: nn.Module,
    x: torch.Tensor,
    threshold: float = config.DEFAULT_THRESHOLD,
    error_mode: str = "squared",
) -> InferenceResult:
    """x_bar = g(f(x)); the score is the per-pixel round-trip error."""
    x = _as_batch(x)
    y_bar = translate(f, x)
    x_bar = translate(g, y_bar)
    collapsed = is_collapsed(y_bar, x) or is_collapsed(x_bar, y_bar)
    if collapsed:
        logger.warning("A Cyclic UNet translator returned its input unchanged; the model looks collapsed.")
    return InferenceResult.from_score(
        pixel_error(x_bar, x, error_mode)[0, 0],
        threshold,
        forward_translation=y_bar[0, 0].cpu(),
        reconstruction=x_bar[0, 0].cpu(),
        collapsed=collapsed,
    )


@torch.no_grad()
def infer_reconstruction(
    net: nn.Module,
    x: torch.Tensor,
    threshold: float = config.DEFAULT_THRESHOLD,
    error_mode: str = "squared",
) -> InferenceResult:
    """AE / VAE / DAE: score by reconstruction error (the VAE decodes its latent mean)."""
    x = _as_batch(x)
    x_bar = translate(net, x)
    return InferenceResult.from_score(
        pixel_error(x_bar, x, error_mode)[0, 0],
        threshold,
        reconstruction=x_bar[0, 0].cpu(),
    )


@torch.no_grad()
def infer_ddpm_uncond(
    net: nn.Module,
    x: torch.Tensor,
    s: NoiseSchedule,
    t_test: int,
    sampler: str = "ddim",
    ddim_steps: Optional[int] = None,
    threshold: float = config.DEFAULT_THRESHOLD,
    generator: Optional[torch.Generator] = None,
    beta_noise_scale: bool = False,
    error_mode: str = "squared",
) -> InferenceResult:
    """Noise x to step t_test, denoise back to step 0 and score the reconstruction error."""
    if not 1 <= t_test <= s.T:
        raise ValueError(f"t_test must be in [1, {s.T}], got {t_test}.")
    x = _as_batch(x)
    x_t = marginal_sample(x, t_test, gaussian_like(x, generator), s)

    def predict(y, t):
        return predict_unconditional(net, y, t)

    if sampler == "ddim":
        n_steps = min(check_sampler(sampler, s, ddim_steps), t_test)
        x_bar = sample_ddim(predict, x_t, s, n_steps, t_start=t_test)
    else:
        check_sampler(sampler, s)
        x_bar = sample_ddpm(predict, x_t, s, generator, beta_noise_scale=beta_noise_scale, t_start=t_test)
    return InferenceResult.from_score(
        pixel_error(x_bar, x, error_mode)[0, 0],
        threshold,
        reconstruction=x_bar[0, 0].cpu(),
    )


def infer_slice(
    method: str,
    networks: dict,
    x: torch.Tensor,
    s: Optional[NoiseSchedule] = None,
    masks: Optional[MaskSet] = None,
    threshold: float = config.DEFAULT_THRESHOLD,
    generator: Optional[torch.Generator] = None,
    sampler: str = "ddim",
    ddim_steps: Optional[int] = None,
    beta_noise_scale: bool = False,
    error_mode: str = "squared",
    mask_batch_size: int = config.MASK_BATCH_SIZE,
    t_test: Optional[int] = None,
) -> InferenceResult:
    if method == "mmccd":
        return infer_mmccd(
            networks["f"], networks["g"], x, masks, s, sampler, ddim_steps, threshold,
            generator, beta_noise_scale, error_mode, mask_batch_size,
        )
    if method == "cyclic_unet":
        return infer_cyclic_unet(networks["f"], networks["g"], x, threshold, error_mode)
    if method in ("ae", "vae", "dae"):
        return infer_reconstruction(networks["net"], x, threshold, error_mode)
    if method == "ddpm_uncond":
        return infer_ddpm_uncond(
            networks["net"], x, s, t_test or max(1, s.T // 2), sampler, ddim_steps,
            threshold, generator, beta_noise_scale, error_mode,
        )
    raise ValueError(f"Unknown method {method!r}.")


def run_inference(
    method: str,
    networks: dict,
    pairs: Sequence[SlicePair],
    seed: int = 0,
    device: str = "cpu",
    **options,
) -> list[InferenceResult]:
    """Score every slice in order; one generator seeded once makes reruns bit-identical."""
    networks = {role: net.to(device).eval() for role, net in networks.items()}
    generator = make_generator(seed)
    results = []
    for pair in tqdm(pairs, desc=f"infer {method}", disable=None):
        x = to_tensor(pair.x).to(device)
        results.append(infer_slice(method, networks, x, generator=generator, **options))
    collapsed = sum(r.collapsed for r in results)
    if collapsed:
        logger.warning("%d of %d slices flagged a collapsed translator.", collapsed, len(results))
    return results


def save_scores(
    results: Sequence[InferenceResult],
    pairs: Sequence[SlicePair],
    root: Union[str, Path],
    split: str,
) -> Path:
    """Write ``scores/<split>/<name>.npy``, optional translations and ``scores_<split>.jsonl``."""
    root = Path(root)
    rows = []
    for result, pair in zip(results, pairs, strict=True):
        rel = Path("scores") / split / f"{pair.name}.npy"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        np.save(root / rel, result.anomaly_score.numpy())
        row = {
            "subject_id": pair.subject_id,
            "slice_index": int(pair.slice_index),
            "split": split,
            "path": rel.as_posix(),
            "threshold": float(result.threshold),
            "collapsed": bool(result.collapsed),
        }
        if result.forward_translation is not None or result.reconstruction is not None:
            trel = Path("translations") / split / f"{pair.name}.npz"
            (root / trel).parent.mkdir(parents=True, exist_ok=True)
            arrays = {
                key: value.numpy()
                for key, value in (("forward_translation", result.forward_translation),
                                   ("reconstruction", result.reconstruction))
                if value is not None
            }
            np.savez_compressed(root / trel, **arrays)
            row["translations"] = trel.as_posix()
        rows.append(row)
    manifest = write_jsonl(root / f"scores_{split}.jsonl", rows)
    logger.info("Wrote %d %s score maps under %s", len(rows), split, root)
    return manifest


def record_threshold(root: Union[str, Path], split: str, threshold: float) -> Path:
    """Store the evaluated threshold on every row of ``scores_<split>.jsonl``."""
    path = Path(root) / f"scores_{split}.jsonl"
    rows = [dict(row, threshold=float(threshold)) for row in read_jsonl(path)]
    return write_jsonl(path, rows)


def load_scores(root: Union[str, Path], split: str) -> list[tuple]:
    """(manifest row, InferenceResult) per slice, in manifest order."""
    root = Path(root)
    out = []
    for row in read_jsonl(root / f"scores_{split}.jsonl"):
        extra = {}
        if row.get("translations"):
            with np.load(root / row["translations"]) as arrays:
                for key in ("forward_translation", "reconstruction"):
                    if key in arrays:
                        extra[key] = torch.from_numpy(arrays[key])
        score = torch.from_numpy(np.load(root / row["path"]))
        out.append((row, InferenceResult.from_score(score, row["threshold"], collapsed=row["collapsed"], **extra)))
    return out


def inference_options(cfg: ExperimentConfig, schedule: Optional[NoiseSchedule] = None, t_test: Optional[int] = None) -> dict:
    """Keyword options for ``run_inference`` from an ExperimentConfig (and the checkpoint's schedule)."""
    s = schedule or build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.kind)
    sp = cfg.sampler
    options = dict(
        s=s,
        threshold=cfg.evaluation.threshold,
        sampler=sp.kind,
        ddim_steps=sp.ddim_steps,
        beta_noise_scale=sp.beta_noise_scale,
        error_mode=sp.error_mode,
        mask_batch_size=sp.mask_batch_size,
        t_test=t_test or sp.resolved_t_test(s.T),
    )
    if cfg.method == "mmccd":
        size = cfg.data.image_size
        options["masks"] = build_mask_set(size, size, cfg.mask.extent, cfg.mask.stride, cfg.mask.orientations)
    return options
