"""Step indices are 1-based (t = 1..T); alpha_bar at t = 0 is 1."""
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import config

Step = Union[int, torch.Tensor]
Predictor = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step beta, alpha and cumulative alpha_bar for T diffusion steps."""

    kind: str
    T: int
    beta_start: float
    beta_end: float
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to t, with alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def alpha_bar_padded(self) -> torch.Tensor:
        """alpha_bar with the t = 0 entry prepended, indexable by t directly."""
        one = torch.ones(1, dtype=self.alpha_bar.dtype)
        return torch.cat([one, self.alpha_bar])

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "NoiseSchedule":
        return build_schedule(
            T=int(descriptor["T"]),
            beta_start=float(descriptor["beta_start"]),
            beta_end=float(descriptor["beta_end"]),
            kind=descriptor.get("kind", config.SCHEDULE_KIND),
        )


def build_schedule(
    T: int = config.NUM_TIMESTEPS,
    beta_start: float = config.BETA_START,
    beta_end: float = config.BETA_END,
    kind: str = config.SCHEDULE_KIND,
) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if kind != "linear":
        raise ValueError(f"Unsupported schedule kind {kind!r}; only 'linear' is implemented.")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}.")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"Beta bounds must satisfy 0 < beta_start <= beta_end < 1, "
            f"got beta_start={beta_start}, beta_end={beta_end}."
        )
    alpha = 1.0 - torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    # exact complement, so beta + alpha == 1 holds bit for bit
    beta = 1.0 - alpha
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(
        kind=kind,
        T=int(T),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )


def _check_step(t: Step, s: NoiseSchedule, lowest: int = 1) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < lowest or hi > s.T:
        raise ValueError(f"Step index out of range [{lowest}, {s.T}]: got {lo}..{hi}.")


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) != 1:
        raise ValueError(f"Image shapes do not match: {sorted(shapes)}.")


def _per_item(values: torch.Tensor, t: Step, like: torch.Tensor):
    """Look up a per-step coefficient, broadcastable against ``like``."""
    if isinstance(t, torch.Tensor):
        picked = values.to(like.device)[t.to(like.device).long()]
        return picked.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t)])


def gaussian_like(reference: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Standard normal noise with the shape, dtype and device of ``reference``.

    Drawn on the generator's device (CPU by default) so seeded runs agree across devices.
    """
    noise = torch.randn(reference.shape, generator=generator, dtype=reference.dtype)
    return noise.to(reference.device)


def q_sample(y0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    return alpha_bar ** 0.5 * y0 + (1.0 - alpha_bar) ** 0.5 * eps


def marginal_sample(y0: torch.Tensor, t: Step, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Exact draw from N(sqrt(alpha_bar_t) y0, (1 - alpha_bar_t) I) given eps."""
    _check_step(t, s)
    _check_shapes(y0, eps)
    alpha_bar = _per_item(s.alpha_bar_padded(), t, y0)
    return q_sample(y0, alpha_bar, eps)


def forward_step(y_prev: torch.Tensor, t: int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One Markov step q(y_t | y_{t-1})."""
    _check_step(t, s)
    _check_shapes(y_prev, eps)
    alpha = s.alpha_at(t)
    return alpha ** 0.5 * y_prev + (1.0 - alpha) ** 0.5 * eps


def posterior_coefficients(alpha_t, alpha_bar_t, alpha_bar_prev):
    """(coef_y0, coef_yt, sigma2) of q(y_{t-1} | y_t, y_0) from raw schedule values."""
    denom = 1.0 - alpha_bar_t
    coef_y0 = alpha_bar_prev ** 0.5 * (1.0 - alpha_t) / denom
    coef_yt = alpha_t ** 0.5 * (1.0 - alpha_bar_prev) / denom
    sigma2 = (1.0 - alpha_bar_prev) / denom * (1.0 - alpha_t)
    return coef_y0, coef_yt, sigma2


def posterior_params(y0: torch.Tensor, yt: torch.Tensor, t: Step, s: NoiseSchedule):
    """Mean and variance of q(y_{t-1} | y_t, y_0)."""
    _check_step(t, s)
    _check_shapes(y0, yt)
    padded = s.alpha_bar_padded()
    if isinstance(t, torch.Tensor):
        if bool((padded[t.cpu().long()] >= 1.0).any()):
            raise ValueError("Degenerate schedule: 1 - alpha_bar_t is zero.")
        alpha_t = _per_item(torch.cat([torch.ones(1, dtype=s.alpha.dtype), s.alpha]), t, yt)
        alpha_bar_t = _per_item(padded, t, yt)
        alpha_bar_prev = _per_item(padded, t - 1, yt)
    else:
        alpha_t, alpha_bar_t, alpha_bar_prev = s.alpha_at(t), s.alpha_bar_at(t), s.alpha_bar_at(t - 1)
        if alpha_bar_t >= 1.0:
            raise ValueError(f"Degenerate schedule at t={t}: 1 - alpha_bar_t is zero.")
    coef_y0, coef_yt, sigma2 = posterior_coefficients(alpha_t, alpha_bar_t, alpha_bar_prev)
    mu = coef_y0 * y0 + coef_yt * yt
    return mu, sigma2


def ddpm_reverse_step(
    yt: torch.Tensor,
    y0_hat: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    eps: Optional[torch.Tensor] = None,
    beta_noise_scale: bool = False,
) -> torch.Tensor:
    """Ancestral step y_t -> y_{t-1}: posterior mean plus scaled noise (none at t = 1).

    ``beta_noise_scale`` replaces the posterior standard deviation with sqrt(1 - alpha_t).
    """
    _check_shapes(yt, y0_hat)
    mu, sigma2 = posterior_params(y0_hat, yt, t, s)
    if t == 1:
        return mu
    if eps is None:
        raise ValueError(f"Noise is required for the reverse step at t={t} > 1.")
    _check_shapes(yt, eps)
    scale = (1.0 - s.alpha_at(t)) ** 0.5 if beta_noise_scale else sigma2 ** 0.5
    return mu + scale * eps


def ddim_update(yt: torch.Tensor, y0_hat: torch.Tensor, alpha_bar_t, alpha_bar_prev) -> torch.Tensor:
    eps_hat = (yt - alpha_bar_t ** 0.5 * y0_hat) / (1.0 - alpha_bar_t) ** 0.5
    return alpha_bar_prev ** 0.5 * y0_hat + (1.0 - alpha_bar_prev) ** 0.5 * eps_hat


def ddim_reverse_step(yt: torch.Tensor, y0_hat: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) jump from step t to t_prev; t_prev = 0 returns y0_hat."""
    if t_prev >= t:
        raise ValueError(f"DDIM requires t_prev < t, got t={t}, t_prev={t_prev}.")
    _check_step(t, s)
    _check_step(t_prev, s, lowest=0)
    _check_shapes(yt, y0_hat)
    if t_prev == 0:
        return y0_hat.clone()
    return ddim_update(yt, y0_hat, s.alpha_bar_at(t), s.alpha_bar_at(t_prev))


def ddim_timesteps(t_start: int, n_steps: int) -> list:
    """Evenly spaced (t, t_prev) pairs from t_start down to 0."""
    if n_steps < 1 or n_steps > t_start:
        raise ValueError(f"Number of DDIM steps must be in [1, {t_start}], got {n_steps}.")
    grid = torch.linspace(float(t_start), 0.0, n_steps + 1, dtype=torch.float64).round().long().tolist()
    return list(zip(grid[:-1], grid[1:]))


def sample_ddpm(
    predict: Predictor,
    y_start: torch.Tensor,
    s: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    beta_noise_scale: bool = False,
    t_start: Optional[int] = None,
) -> torch.Tensor:
    """Full ancestral chain t = t_start..1 starting from y_start."""
    y = y_start
    for t in range(t_start or s.T, 0, -1):
        eps = gaussian_like(y, generator) if t > 1 else None
        y = ddpm_reverse_step(y, predict(y, t), t, s, eps, beta_noise_scale=beta_noise_scale)
    return y


def sample_ddim(
    predict: Predictor,
    y_start: torch.Tensor,
    s: NoiseSchedule,
    n_steps: int,
    t_start: Optional[int] = None,
) -> torch.Tensor:
    """Deterministic DDIM chain over ``n_steps`` evenly spaced steps."""
    y = y_start
    for t, t_prev in ddim_timesteps(t_start or s.T, n_steps):
        y = ddim_reverse_step(y, predict(y, t), t, t_prev, s)
    return y
