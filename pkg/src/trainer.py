import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.dataset import SlicePair, SliceDataset, stack_pairs
from src.diffusion import NoiseSchedule, build_schedule, gaussian_like, marginal_sample
from src.errors import ConfigError, DivergenceError
from src.experiment import ExperimentConfig, to_dict
from src.masking import MaskSet, apply_mask_noise, build_mask_set, random_masks
from src.unet import (
    build_method_networks,
    denoise_predict,
    load_checkpoint,
    predict_unconditional,
    save_checkpoint,
    translate,
)
from src.utils import append_jsonl, make_generator, seed_everything, write_jsonl

logger = logging.getLogger(__name__)

Batch = Union[Sequence[SlicePair], tuple]


def l2_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-image L2 norm ||pred - target||_2."""
    if pred.shape != target.shape:
        raise ValueError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape.")
    return torch.linalg.vector_norm((pred - target).flatten(1), dim=1).mean()


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent entries, averaged over the batch."""
    return (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp())).flatten(1).sum(dim=1).mean()


def _check_loss(loss: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise DivergenceError(
            f"{what} loss became {float(loss)}; training diverged. "
            "Lower the learning rate or resume from an earlier checkpoint."
        )


def _as_tensors(batch: Batch, device=None, dtype=torch.float32):
    """Accept a slice-pair collection or an (x, y) tensor pair."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor):
        x, y = batch
    else:
        x, y, _ = stack_pairs(list(batch), dtype=dtype)
    if device is not None:
        x, y = x.to(device), y.to(device)
    return x, y


def _optimize(optimizer: torch.optim.Optimizer, loss: torch.Tensor, what: str) -> float:
    _check_loss(loss, what)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def mmccd_loss(
    f: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    s: NoiseSchedule,
    masks: MaskSet,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Masked diffusion loss: predict y from its noised version and a strip-masked x."""
    n = x.shape[0]
    t = torch.randint(1, s.T + 1, (n,), generator=generator).to(x.device)
    m = random_masks(masks, n, generator).to(device=x.device, dtype=x.dtype)
    x_hat = apply_mask_noise(x, m, gaussian_like(x, generator))
    y_t = marginal_sample(y, t, gaussian_like(y, generator), s)
    return l2_loss(denoise_predict(f, y_t, x_hat, t), y)


def train_step_mmccd(
    f: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    s: NoiseSchedule,
    masks: MaskSet,
    generator: Optional[torch.Generator] = None,
) -> float:
    """One step on the conditional denoiser f; the batch must be anomaly-free."""
    device = next(f.parameters()).device
    x, y = _as_tensors(batch, device)
    f.train()
    return _optimize(optimizer, mmccd_loss(f, x, y, s, masks, generator), "Denoiser")


def train_step_backward(g: nn.Module, optimizer: torch.optim.Optimizer, batch: Batch) -> float:
    """Supervised y -> x regression for the backward translator g."""
    x, y = _as_tensors(batch, next(g.parameters()).device)
    g.train()
    return _optimize(optimizer, l2_loss(translate(g, y), x), "Backward translator")


def train_step_forward(f: nn.Module, optimizer: torch.optim.Optimizer, batch: Batch) -> float:
    """Supervised x -> y regression for the Cyclic UNet forward translator."""
    x, y = _as_tensors(batch, next(f.parameters()).device)
    f.train()
    return _optimize(optimizer, l2_loss(translate(f, x), y), "Forward translator")


def reconstruction_loss(
    net: nn.Module,
    x: torch.Tensor,
    noise_sigma: float = 0.0,
    kl_weight: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """AE / DAE / VAE objective; the noise draw is skipped entirely when sigma is 0."""
    inputs = x + noise_sigma * gaussian_like(x, generator) if noise_sigma > 0 else x
    x_hat, mu, logvar = net.forward_with_latent(inputs)
    loss = l2_loss(x_hat, x)
    if mu is not None and kl_weight > 0:
        loss = loss + kl_weight * kl_divergence(mu, logvar)
    return loss


def train_step_reconstruction(
    net: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    noise_sigma: float = 0.0,
    kl_weight: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> float:
    x, _ = _as_tensors(batch, next(net.parameters()).device)
    net.train()
    loss = reconstruction_loss(net, x, noise_sigma, kl_weight, generator)
    return _optimize(optimizer, loss, f"{getattr(net, 'variant', 'Autoencoder')}")


def train_step_ddpm_uncond(
    net: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    s: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Unconditional denoiser on x alone, same y_0 parameterization as f."""
    x, _ = _as_tensors(batch, next(net.parameters()).device)
    net.train()
    t = torch.randint(1, s.T + 1, (x.shape[0],), generator=generator).to(x.device)
    x_t = marginal_sample(x, t, gaussian_like(x, generator), s)
    return _optimize(optimizer, l2_loss(predict_unconditional(net, x_t, t), x), "Unconditional denoiser")


class Trainer:
    """Optimizer loop for one method: Adam per network, a loss log line per step, periodic checkpoints."""

    def __init__(
        self,
        method: str,
        networks: dict,
        train_pairs: Sequence[SlicePair],
        output_dir: Union[str, Path],
        schedule: Optional[NoiseSchedule] = None,
        mask_set: Optional[MaskSet] = None,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        max_steps: int = 0,
        checkpoint_every: int = 1000,
        seed: int = 0,
        workers: int = 0,
        device: str = "cpu",
        noise_sigma: float = 0.0,
        kl_weight: float = 0.0,
        experiment: Optional[dict] = None,
    ):
        if method == "mmccd" and mask_set is None:
            raise ValueError("MMCCD training needs a mask set.")
        if method in ("mmccd", "ddpm_uncond") and schedule is None:
            raise ValueError(f"{method} training needs a noise schedule.")
        if any(p.anomaly_gt.any() for p in train_pairs):
            raise ValueError("Training slices must be anomaly-free.")
        self.method = method
        self.networks = {role: net.to(device) for role, net in networks.items()}
        self.optimizers = {
            role: torch.optim.Adam(net.parameters(), lr=learning_rate) for role, net in self.networks.items()
        }
        self.train_pairs = list(train_pairs)
        self.output_dir = Path(output_dir)
        self.schedule = schedule
        self.mask_set = mask_set
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.workers = workers
        self.device = device
        self.noise_sigma = noise_sigma
        self.kl_weight = kl_weight
        self.experiment = experiment or {}
        self.generator = make_generator(seed)
        self.step = 0

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    @property
    def latest_checkpoint(self) -> Path:
        return self.checkpoint_dir / "latest.pt"

    @property
    def loss_log(self) -> Path:
        return self.output_dir / "loss_log.jsonl"

    def _batches(self):
        """Endless batches; epoch e shuffles with seed + e, so a resumed run continues the same order."""
        if not self.train_pairs:
            raise ValueError("No training slices; generate or ingest a dataset first.")
        order = torch.Generator()
        loader = DataLoader(
            SliceDataset(self.train_pairs),
            batch_size=self.batch_size,
            shuffle=True,
            num_workers=self.workers,
            generator=order,
        )
        epoch, skip = divmod(self.step, len(loader))
        while True:
            order.manual_seed(self.seed + epoch)
            for i, (x, y) in enumerate(loader):
                if i >= skip:
                    yield x.to(self.device), y.to(self.device)
            epoch, skip = epoch + 1, 0

    def train_step(self, batch: tuple) -> dict:
        """One optimizer step for every network of the method; returns losses by role."""
        nets, opts, gen = self.networks, self.optimizers, self.generator
        if self.method == "mmccd":
            return {
                "f": train_step_mmccd(nets["f"], opts["f"], batch, self.schedule, self.mask_set, gen),
                "g": train_step_backward(nets["g"], opts["g"], batch),
            }
        if self.method == "cyclic_unet":
            return {
                "f": train_step_forward(nets["f"], opts["f"], batch),
                "g": train_step_backward(nets["g"], opts["g"], batch),
            }
        if self.method == "ddpm_uncond":
            return {"net": train_step_ddpm_uncond(nets["net"], opts["net"], batch, self.schedule, gen)}
        return {"net": train_step_reconstruction(nets["net"], opts["net"], batch, self.noise_sigma, self.kl_weight, gen)}

    def save(self) -> Path:
        kwargs = dict(
            method=self.method,
            networks=self.networks,
            schedule=self.schedule.descriptor() if self.schedule else None,
            step=self.step,
            optimizers=self.optimizers,
            experiment=self.experiment,
            rng_state=self.generator.get_state(),
        )
        save_checkpoint(self.checkpoint_dir / f"step_{self.step:07d}.pt", **kwargs)
        return save_checkpoint(self.latest_checkpoint, **kwargs)

    def resume(self) -> None:
        payload = load_checkpoint(self.latest_checkpoint, device=self.device)
        if payload["method"] != self.method:
            raise ConfigError(f"Checkpoint {self.latest_checkpoint} holds method {payload['method']!r}, not {self.method!r}.")
        for role, net in self.networks.items():
            net.load_state_dict(payload["networks"][role].state_dict())
            if role in payload["optimizers"]:
                self.optimizers[role].load_state_dict(payload["optimizers"][role])
        self.step = int(payload["step"])
        if payload.get("rng_state") is not None:
            self.generator.set_state(payload["rng_state"].cpu())
        logger.info("Resumed %s from step %d", self.method, self.step)

    def run(self, resume: bool = False) -> Path:
        """Train up to ``max_steps``; returns the latest checkpoint path."""
        if self.latest_checkpoint.exists():
            if not resume:
                raise ConfigError(
                    f"{self.latest_checkpoint} already exists; pass --resume to continue "
                    "or choose another output directory."
                )
            self.resume()
        else:
            write_jsonl(self.loss_log, [])

        if self.step >= self.max_steps:
            path = self.save()
            logger.info("Nothing to train (step %d, max_steps %d); checkpoint at %s", self.step, self.max_steps, path)
            return path

        batches = self._batches()
        progress = tqdm(range(self.step, self.max_steps), desc=f"train {self.method}", disable=None)
        for _ in progress:
            losses = self.train_step(next(batches))
            self.step += 1
            append_jsonl(self.loss_log, {"step": self.step, **{f"loss_{role}": v for role, v in losses.items()}})
            progress.set_postfix({role: f"{v:.4f}" for role, v in losses.items()})
            if self.step % self.checkpoint_every == 0 and self.step < self.max_steps:
                self.save()
        path = self.save()
        logger.info("Finished %s training at step %d; checkpoint at %s", self.method, self.step, path)
        return path


def trainer_from_config(
    cfg: ExperimentConfig,
    train_pairs: Sequence[SlicePair],
    output_dir: Optional[Union[str, Path]] = None,
    noise_sigma: Optional[float] = None,
    kl_weight: Optional[float] = None,
) -> Trainer:
    """Seeded networks and a Trainer for ``cfg.method`` from an ExperimentConfig."""
    seed_everything(cfg.seed, cfg.deterministic)
    net = cfg.network
    networks = build_method_networks(
        cfg.method, cfg.data.image_size, net.base_width, net.depth, net.channel_mults, net.time_dim, net.latent_channels,
    )
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.kind)
    mask_set = None
    if cfg.method == "mmccd":
        size = cfg.data.image_size
        mask_set = build_mask_set(size, size, cfg.mask.extent, cfg.mask.stride, cfg.mask.orientations)
    if noise_sigma is None:
        noise_sigma = cfg.train.dae_sigma if cfg.method == "dae" else 0.0
    if kl_weight is None:
        kl_weight = cfg.train.vae_kl_weight if cfg.method == "vae" else 0.0
    return Trainer(
        method=cfg.method,
        networks=networks,
        train_pairs=train_pairs,
        output_dir=output_dir or cfg.output_path,
        schedule=schedule if cfg.method in ("mmccd", "ddpm_uncond") else None,
        mask_set=mask_set,
        learning_rate=cfg.train.learning_rate,
        batch_size=cfg.train.batch_size,
        max_steps=cfg.train.max_steps,
        checkpoint_every=cfg.train.checkpoint_every,
        seed=cfg.seed,
        workers=0 if cfg.deterministic else cfg.workers,
        device=cfg.device,
        noise_sigma=noise_sigma,
        kl_weight=kl_weight,
        experiment=to_dict(cfg),
    )
