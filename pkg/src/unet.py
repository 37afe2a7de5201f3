import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
import config
from src.errors import DivergenceError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
BASELINE_VARIANTS = ("AE", "VAE", "DAE")


@dataclass
class NetworkConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = config.UNET_BASE_WIDTH
    depth: int = config.UNET_DEPTH
    channel_mults: Optional[tuple] = None
    time_embedding: bool = False
    time_dim: int = config.TIME_EMBEDDING_DIM
    image_size: int = config.IMAGE_SIZE
    skip_connections: bool = True
    zero_init_head: bool = True

    def widths(self) -> list[int]:
        mults = self.channel_mults or (config.UNET_CHANNEL_MULTS + (2,) * self.depth)[: self.depth]
        if len(mults) != self.depth:
            raise ValueError(f"channel_mults needs {self.depth} entries, got {len(mults)}.")
        return [self.base_width * int(m) for m in mults]

    def validate(self) -> None:
        if min(self.in_channels, self.out_channels, self.base_width, self.depth) < 1:
            raise ValueError(f"Network sizes must be positive: {self}.")
        scale = 2 ** self.depth
        if self.image_size % scale:
            raise ValueError(f"Image size {self.image_size} is not divisible by 2^depth = {scale}.")
        if self.image_size // scale < 4:
            raise ValueError(
                f"depth={self.depth} shrinks a {self.image_size}px input to a "
                f"{self.image_size // scale}px bottleneck; it must stay at least 4x4."
            )


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConvBlock(nn.Module):
    """Two GroupNorm-SiLU-Conv layers with a residual path; the time embedding is added between them."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: Optional[int]):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Encoder-decoder with a skip connection at every resolution."""

    def __init__(self, net_config: NetworkConfig):
        super().__init__()
        net_config.validate()
        self.config = net_config
        widths = net_config.widths()
        time_dim = net_config.time_dim if net_config.time_embedding else None

        if time_dim:
            self.time_mlp = nn.Sequential(
                nn.Linear(time_dim, time_dim),
                nn.SiLU(),
                nn.Linear(time_dim, time_dim),
            )
        else:
            self.time_mlp = None

        self.stem = nn.Conv2d(net_config.in_channels, net_config.base_width, 3, padding=1)
        self.down = nn.ModuleList()
        ch = net_config.base_width
        for w in widths:
            self.down.append(ConvBlock(ch, w, time_dim))
            ch = w
        self.middle = ConvBlock(ch, ch, time_dim)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            in_ch = ch + w if net_config.skip_connections else ch
            self.up.append(ConvBlock(in_ch, w, time_dim))
            ch = w
        self.head_norm = nn.GroupNorm(_groups(ch), ch)
        self.head = nn.Conv2d(ch, net_config.out_channels, 3, padding=1)
        if net_config.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def embed(self, t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if self.time_mlp is None:
            return None
        if t is None:
            raise ValueError("This network is step-conditioned; a step index is required.")
        dtype = self.time_mlp[0].weight.dtype
        return self.time_mlp(sinusoidal_embedding(t, self.config.time_dim, dtype))

    def encode(self, x: torch.Tensor, temb: Optional[torch.Tensor]):
        h = self.stem(x)
        skips = []
        for block in self.down:
            h = block(h, temb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        return self.middle(h, temb), skips

    def decode(self, h: torch.Tensor, skips: list, temb: Optional[torch.Tensor]) -> torch.Tensor:
        for block, skip in zip(self.up, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if self.config.skip_connections:
                h = torch.cat([h, skip], dim=1)
            h = block(h, temb)
        return self.head(F.silu(self.head_norm(h)))

    def forward(self, x: torch.Tensor, t: Optional[torch.Tensor] = None) -> torch.Tensor:
        temb = self.embed(t)
        h, skips = self.encode(x, temb)
        return self.decode(h, skips, temb)


class Autoencoder(UNet):
    """Reconstruction baseline x -> x_hat; the VAE variant adds a Gaussian latent at the bottleneck."""

    def __init__(self, net_config: NetworkConfig, variant: str = "AE", latent_channels: int = 8):
        if variant not in BASELINE_VARIANTS:
            raise ValueError(f"Unknown baseline variant {variant!r}; expected one of {BASELINE_VARIANTS}.")
        super().__init__(replace(net_config, skip_connections=False, time_embedding=False))
        self.variant = variant
        self.latent_channels = latent_channels
        if variant == "VAE":
            bottleneck = self.config.widths()[-1]
            self.to_latent = nn.Conv2d(bottleneck, 2 * latent_channels, 1)
            self.from_latent = nn.Conv2d(latent_channels, bottleneck, 1)

    def forward_with_latent(self, x: torch.Tensor):
        h, skips = self.encode(x, None)
        mu = logvar = None
        if self.variant == "VAE":
            mu, logvar = self.to_latent(h).chunk(2, dim=1)
            # eval decodes the mean so scores are reproducible
            z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar) if self.training else mu
            h = self.from_latent(z)
        return self.decode(h, skips, None), mu, logvar

    def forward(self, x: torch.Tensor, t: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.forward_with_latent(x)[0]


def make_unet(net_config: NetworkConfig) -> UNet:
    """Build a denoiser (2 channels in, time embedding) or a translator (1 in, no embedding)."""
    return UNet(net_config)


def make_baseline(variant: str, net_config: NetworkConfig, latent_channels: int = 8) -> Autoencoder:
    return Autoencoder(net_config, variant=variant, latent_channels=latent_channels)


def denoiser_config(image_size: int, **overrides) -> NetworkConfig:
    return NetworkConfig(in_channels=2, out_channels=1, time_embedding=True, image_size=image_size, **overrides)


def translator_config(image_size: int, **overrides) -> NetworkConfig:
    return NetworkConfig(in_channels=1, out_channels=1, time_embedding=False, image_size=image_size, **overrides)


def build_method_networks(
    method: str,
    image_size: int,
    base_width: int = config.UNET_BASE_WIDTH,
    depth: int = config.UNET_DEPTH,
    channel_mults: Optional[tuple] = None,
    time_dim: int = config.TIME_EMBEDDING_DIM,
    latent_channels: int = 8,
) -> dict:
    """Networks by role: f and g for the translation methods, a single ``net`` for the baselines."""
    shared = dict(
        base_width=base_width,
        depth=depth,
        channel_mults=tuple(channel_mults) if channel_mults else None,
        time_dim=time_dim,
    )
    if method == "mmccd":
        return {"f": make_unet(denoiser_config(image_size, **shared)), "g": make_unet(translator_config(image_size, **shared))}
    if method == "cyclic_unet":
        return {"f": make_unet(translator_config(image_size, **shared)), "g": make_unet(translator_config(image_size, **shared))}
    if method in ("ae", "vae", "dae"):
        return {"net": make_baseline(method.upper(), translator_config(image_size, **shared), latent_channels)}
    if method == "ddpm_uncond":
        return {"net": make_unet(NetworkConfig(time_embedding=True, image_size=image_size, **shared))}
    raise ValueError(f"Unknown method {method!r}.")


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_steps(t: Union[int, torch.Tensor], batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        steps = t.to(device).long().reshape(-1)
        return steps.expand(batch) if steps.numel() == 1 else steps
    return torch.full((batch,), int(t), device=device, dtype=torch.long)


def _check_finite(out: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(out).all()):
        raise DivergenceError(
            f"{what} produced non-finite values ({int((~torch.isfinite(out)).sum())} entries); "
            "training has likely diverged. Lower the learning rate or resume from an earlier checkpoint."
        )
    return out


def denoise_predict(net: nn.Module, y_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
    """y_0 estimate f(y_t, cond, t); the condition enters as a second input channel."""
    if y_t.shape != cond.shape:
        raise ValueError(f"Noisy image {tuple(y_t.shape)} and condition {tuple(cond.shape)} differ in shape.")
    steps = _as_steps(t, y_t.shape[0], y_t.device)
    return _check_finite(net(torch.cat([y_t, cond], dim=1), steps), "Denoiser")


def predict_unconditional(net: nn.Module, y_t: torch.Tensor, t) -> torch.Tensor:
    steps = _as_steps(t, y_t.shape[0], y_t.device)
    return _check_finite(net(y_t, steps), "Unconditional denoiser")


def translate(net: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Deterministic translation (or reconstruction) of a batch of 1-channel images."""
    return _check_finite(net(image), "Translator")


def _describe(net: nn.Module) -> dict:
    entry = {"config": asdict(net.config), "state_dict": net.state_dict()}
    if isinstance(net, Autoencoder):
        entry.update(kind="autoencoder", variant=net.variant, latent_channels=net.latent_channels)
    else:
        entry["kind"] = "unet"
    return entry


def _rebuild(entry: dict) -> nn.Module:
    cfg = dict(entry["config"])
    if cfg.get("channel_mults") is not None:
        cfg["channel_mults"] = tuple(cfg["channel_mults"])
    net_config = NetworkConfig(**cfg)
    if entry["kind"] == "autoencoder":
        net = Autoencoder(net_config, entry["variant"], entry["latent_channels"])
    else:
        net = UNet(net_config)
    net.load_state_dict(entry["state_dict"])
    return net


def save_checkpoint(
    path: Union[str, Path],
    method: str,
    networks: dict,
    schedule: Optional[dict] = None,
    step: int = 0,
    optimizers: Optional[dict] = None,
    experiment: Optional[dict] = None,
    rng_state: Optional[torch.Tensor] = None,
) -> Path:
    """Write a self-describing checkpoint: network configs and weights, schedule, step, sampling RNG state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "method": method,
        "networks": {role: _describe(net) for role, net in networks.items()},
        "optimizers": {role: opt.state_dict() for role, opt in (optimizers or {}).items()},
        "schedule": schedule,
        "step": int(step),
        "experiment": experiment or {},
        "rng_state": rng_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path], device: str = "cpu") -> dict:
    """Read a checkpoint back; ``networks`` holds rebuilt modules in eval mode."""
    try:
        payload = torch.load(Path(path), map_location=device, weights_only=False)
    except Exception as e:
        raise RuntimeError(f"Could not read checkpoint {path}: {str(e)}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise RuntimeError(f"Checkpoint {path} has format version {version}; expected {CHECKPOINT_FORMAT_VERSION}.")
    payload["networks"] = {
        role: _rebuild(entry).to(device).eval() for role, entry in payload["networks"].items()
    }
    return payload
