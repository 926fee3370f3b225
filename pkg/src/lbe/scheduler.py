"""Diffusion process numerics: noise schedules, forward noising and the
deterministic DDIM sampling / inversion step pair.

The noising convention is z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps,
where abar_t is the cumulative product of (1 - beta_s). The sampling step and
the inversion step are exact algebraic inverses of each other whenever both
are fed the same predicted noise.

Everything here is a pure function over immutable inputs. Schedule
coefficients are kept as Python floats (double precision), so the tensor math
runs at whatever precision the latent carries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
DEFAULT_STEPS = 50


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients abar_0..abar_T for a T-step ladder.

    abar_0 is always 1.0; schedules built by `make_schedule` are strictly
    decreasing with all values in (0, 1].
    """

    T: int
    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"schedule needs T >= 1, got {self.T}")
        if len(self.alpha_bar) != self.T + 1:
            raise ValueError(
                f"alpha_bar must have T+1={self.T + 1} entries, got {len(self.alpha_bar)}"
            )
        if self.alpha_bar[0] != 1.0:
            raise ValueError(f"alpha_bar[0] must be exactly 1.0, got {self.alpha_bar[0]}")


@dataclass
class Latent:
    """A latent tensor of shape (c, h, w) tagged with the noise level it sits at."""

    data: torch.Tensor
    timestep_tag: int


def make_schedule(
    T: int = DEFAULT_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a linear-beta schedule: abar_t = prod_{s<=t} (1 - beta_s).

    Betas are linearly spaced from beta_start to beta_end over T steps; both
    must lie in (0, 1) with beta_start <= beta_end.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    alpha_bar = [1.0]
    running = 1.0
    for i in range(T):
        beta = beta_start if T == 1 else beta_start + (beta_end - beta_start) * i / (T - 1)
        running *= 1.0 - beta
        alpha_bar.append(running)
    return NoiseSchedule(T=T, alpha_bar=tuple(alpha_bar))


def noise_to_level(z0: Latent, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> Latent:
    """Noise a clean latent to level t: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if z0.timestep_tag != 0:
        raise ValueError(f"noise_to_level expects a clean latent (tag 0), got tag {z0.timestep_tag}")
    if eps.shape != z0.data.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.data.shape)}")
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must be in [0, {schedule.T}], got {t}")
    abar = schedule.alpha_bar[t]
    data = math.sqrt(abar) * z0.data + math.sqrt(1.0 - abar) * eps
    return Latent(data=data, timestep_tag=t)


def ddim_sample_step(z_t: Latent, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule) -> Latent:
    """One deterministic denoising step from level t to level t-1.

    z_{t-1} = sqrt(abar_{t-1}) * (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
              + sqrt(1-abar_{t-1}) * eps
    """
    _check_step_args(z_t, eps_pred, t, schedule)
    abar_t = schedule.alpha_bar[t]
    abar_prev = schedule.alpha_bar[t - 1]
    z0_pred = (z_t.data - math.sqrt(1.0 - abar_t) * eps_pred) / math.sqrt(abar_t)
    data = math.sqrt(abar_prev) * z0_pred + math.sqrt(1.0 - abar_prev) * eps_pred
    return Latent(data=data, timestep_tag=t - 1)


def ddim_invert_step(z_prev: Latent, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule) -> Latent:
    """One inversion step from level t-1 up to level t (inverse of ddim_sample_step).

    zhat_t = sqrt(abar_t) * (zhat_{t-1} - sqrt(1-abar_{t-1}) eps) / sqrt(abar_{t-1})
             + sqrt(1-abar_t) * eps
    """
    _check_step_args(z_prev, eps_pred, t, schedule)
    if z_prev.timestep_tag != t - 1:
        raise ValueError(
            f"inversion to level {t} needs a latent at level {t - 1}, got tag {z_prev.timestep_tag}"
        )
    abar_t = schedule.alpha_bar[t]
    abar_prev = schedule.alpha_bar[t - 1]
    z0_pred = (z_prev.data - math.sqrt(1.0 - abar_prev) * eps_pred) / math.sqrt(abar_prev)
    data = math.sqrt(abar_t) * z0_pred + math.sqrt(1.0 - abar_t) * eps_pred
    return Latent(data=data, timestep_tag=t)


def _check_step_args(z: Latent, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    if eps_pred.shape != z.data.shape:
        raise ValueError(
            f"eps_pred shape {tuple(eps_pred.shape)} != latent shape {tuple(z.data.shape)}"
        )
