"""
Noise schedule, closed-form forward noising and the guided reverse step.

Step indices are 1-based: ``t`` runs from 1 (almost clean) to ``T`` (almost pure noise).
"""

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

from config.console import get_logger
from config.errors import ScheduleError, ShapeError

logger = get_logger(__name__)

GradientFn = Callable[[torch.Tensor, int], torch.Tensor]
StepIndex = Union[int, torch.Tensor]

VARIANCES = ("small", "posterior")
PARAMETERIZATIONS = ("epsilon", "x0")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step vectors of length T, stored in float64 and indexed by ``t - 1``."""

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    variance: str = "small"

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            vector = getattr(self, name)
            if vector.shape != (self.T,):
                raise ScheduleError(f"{name} has shape {tuple(vector.shape)}, expected ({self.T},)")
            bad = (~torch.isfinite(vector)).nonzero()
            if len(bad):
                raise ScheduleError(f"{name} is non-finite at t={int(bad[0]) + 1}")
        bad = ((self.beta <= 0) | (self.beta >= 1)).nonzero()
        if len(bad):
            index = int(bad[0])
            raise ScheduleError(f"beta[t={index + 1}]={float(self.beta[index])} outside (0, 1)")
        if self.T > 1:
            bad = (self.alpha_bar[1:] >= self.alpha_bar[:-1]).nonzero()
            if len(bad):
                raise ScheduleError(f"alpha_bar not strictly decreasing at t={int(bad[0]) + 2}")
        bad = (self.sigma < 0).nonzero()
        if len(bad):
            raise ScheduleError(f"sigma[t={int(bad[0]) + 1}] is negative")

    def check_step(self, t: StepIndex) -> None:
        low, high = (t, t) if isinstance(t, int) else (int(t.min()), int(t.max()))
        if low < 1 or high > self.T:
            raise ScheduleError(f"step index out of range [1, {self.T}]: {low if low < 1 else high}")

    def at(self, name: str, t: StepIndex, like: torch.Tensor) -> torch.Tensor:
        """Gather ``name`` at step(s) ``t`` in the dtype/device of ``like``, broadcastable to it."""
        vector = getattr(self, name)
        if isinstance(t, int):
            return vector[t - 1].to(dtype=like.dtype, device=like.device)
        values = vector.to(like.device)[t.long() - 1].to(like.dtype)
        return values.reshape(-1, *([1] * (like.dim() - 1)))

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(
    T: int = 100,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.1,
    variance: str = "small",
) -> NoiseSchedule:
    """
    Build a noise schedule.

    Args:
        T: number of diffusion steps
        kind: schedule family; only ``linear`` is supported
        beta_start, beta_end: first and last noise variances
        variance: ``small`` (sigma_t^2 = beta_t) or ``posterior`` (the DDPM posterior variance)
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind '{kind}'")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if variance not in VARIANCES:
        raise ScheduleError(f"unknown variance '{variance}', expected one of {VARIANCES}")

    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    if variance == "small":
        sigma = beta.sqrt()
    else:
        prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        sigma = (beta * (1.0 - prev) / (1.0 - alpha_bar)).sqrt()
    schedule = NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, variance=variance)
    if float(alpha_bar[-1]) >= 0.01:
        logger.warning("alpha_bar[T]=%.4f >= 0.01: terminal marginal is far from N(0, I)", float(alpha_bar[-1]))
    return schedule


def schedule_hash(schedule: NoiseSchedule) -> str:
    digest = hashlib.sha256(f"{schedule.T}:{schedule.variance}".encode("utf-8"))
    digest.update(schedule.beta.numpy().tobytes())
    return digest.hexdigest()[:16]


@dataclass(frozen=True)
class GuidanceSpec:
    """Extra score term ``s * sigma_t^2 * grad log p(x^t | x^0)`` added to the reverse mean."""

    strength: float = 0.0
    gradient_fn: Optional[GradientFn] = None

    def __post_init__(self):
        if self.strength < 0:
            raise ScheduleError(f"guidance strength must be >= 0, got {self.strength}")

    @property
    def active(self) -> bool:
        return self.strength != 0.0


def forward_sample(x0: torch.Tensor, t: StepIndex, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x^t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise."""
    schedule.check_step(t)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    alpha_bar = schedule.at("alpha_bar", t, x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * noise


def predicted_x0(xt: torch.Tensor, t: int, predicted: torch.Tensor, schedule: NoiseSchedule,
                 parameterization: str = "epsilon") -> torch.Tensor:
    if parameterization == "x0":
        return predicted
    alpha_bar = schedule.at("alpha_bar", t, xt)
    return (xt - (1.0 - alpha_bar).sqrt() * predicted) / alpha_bar.sqrt()


def posterior_mean(xt: torch.Tensor, t: int, predicted: torch.Tensor, schedule: NoiseSchedule,
                   parameterization: str = "epsilon") -> torch.Tensor:
    """DDPM mean of p(x^{t-1} | x^t) from an epsilon or x0 prediction."""
    beta = schedule.at("beta", t, xt)
    alpha = schedule.at("alpha", t, xt)
    alpha_bar = schedule.at("alpha_bar", t, xt)
    if parameterization == "epsilon":
        return (xt - beta / (1.0 - alpha_bar).sqrt() * predicted) / alpha.sqrt()
    if parameterization != "x0":
        raise ScheduleError(f"unknown parameterization '{parameterization}'")
    prev = schedule.alpha_bar_prev(t)
    coef_x0 = prev ** 0.5 * beta / (1.0 - alpha_bar)
    coef_xt = alpha.sqrt() * (1.0 - prev) / (1.0 - alpha_bar)
    return coef_x0 * predicted + coef_xt * xt


def reverse_step(
    xt: torch.Tensor,
    t: int,
    predicted: torch.Tensor,
    schedule: NoiseSchedule,
    guidance: Optional[GuidanceSpec] = None,
    cond_gradient: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    parameterization: str = "epsilon",
) -> torch.Tensor:
    """
    Draw x^{t-1} ~ N(mu_theta(x^t, t) + s sigma_t^2 grad, sigma_t^2 I).

    ``cond_gradient`` takes precedence over ``guidance.gradient_fn``. With
    strength 0 neither is consulted. At t=1 no noise is added.
    """
    schedule.check_step(t)
    if predicted.shape != xt.shape:
        raise ShapeError(f"prediction shape {tuple(predicted.shape)} != x^t shape {tuple(xt.shape)}")
    mean = posterior_mean(xt, t, predicted, schedule, parameterization)
    sigma = schedule.at("sigma", t, xt)

    if guidance is not None and guidance.active:
        gradient = cond_gradient
        if gradient is None and guidance.gradient_fn is not None:
            gradient = guidance.gradient_fn(xt, t)
        if gradient is not None:
            if gradient.shape != xt.shape:
                raise ShapeError(f"guidance gradient shape {tuple(gradient.shape)} != {tuple(xt.shape)}")
            mean = mean + guidance.strength * sigma ** 2 * gradient

    if t == 1 or float(schedule.sigma[t - 1]) == 0.0:
        return mean
    if noise is None:
        noise = torch.randn(xt.shape, generator=generator, dtype=xt.dtype, device=xt.device)
    elif noise.shape != xt.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x^t shape {tuple(xt.shape)}")
    return mean + sigma * noise


def observation_guidance(observed: torch.Tensor, mask: torch.Tensor, schedule: NoiseSchedule) -> GradientFn:
    """
    Score of the forward marginal q(x^t | x^0) at the observed weeks.

    ``observed`` and ``mask`` broadcast against x^t; unobserved weeks get zero gradient.
    """

    def gradient(xt: torch.Tensor, t: int) -> torch.Tensor:
        alpha_bar = schedule.at("alpha_bar", t, xt)
        target = observed.to(xt.dtype)
        return -(xt - alpha_bar.sqrt() * target) / (1.0 - alpha_bar) * mask.to(xt.dtype)

    return gradient
