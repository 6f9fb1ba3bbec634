"""Discrete noise schedule, forward noising, and DDIM sampling.

The schedule is the standard linear-beta DDPM construction.  Sampling
is deterministic DDIM (eta = 0), so a fixed initial latent and a fixed
model give bitwise-identical samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .util import DTYPE, as_tensor

EpsModel = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # (T,)
    alphas: torch.Tensor  # (T,)
    alpha_bars: torch.Tensor  # (T,) cumulative products

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]

    @classmethod
    def linear(cls, num_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if num_steps < 2:
            raise ValueError("schedule needs at least 2 steps")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
        betas = torch.linspace(beta_start, beta_end, num_steps, dtype=DTYPE)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))

    def validate_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps})")
        return t


def add_noise(schedule: NoiseSchedule, z0, t: int, eps) -> torch.Tensor:
    """Forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = schedule.validate_t(t)
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"latent shape {tuple(z0.shape)} != noise shape {tuple(eps.shape)}")
    abar = schedule.alpha_bars[t]
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def ddim_timesteps(num_train_steps: int, num_sample_steps: int) -> list[int]:
    """Strictly decreasing timestep ladder from T-1 down to 0."""
    if num_sample_steps < 1:
        raise ValueError("need at least one sampling step")
    num_sample_steps = min(num_sample_steps, num_train_steps)
    grid = np.linspace(num_train_steps - 1, 0, num_sample_steps)
    ts = sorted({int(round(v)) for v in grid}, reverse=True)
    return ts


def ddim_sample(
    eps_model: EpsModel,
    schedule: NoiseSchedule,
    z_init: torch.Tensor,
    num_sample_steps: int = 25,
) -> torch.Tensor:
    """Deterministic DDIM trajectory from z_T to a clean latent.

    ``eps_model(z, t)`` predicts the noise at integer timestep ``t``.
    Each step reconstructs z0 from the prediction and re-noises it to
    the previous ladder rung; the last rung returns the z0 estimate.
    """
    z = as_tensor(z_init)
    ts = ddim_timesteps(schedule.num_steps, num_sample_steps)
    for i, t in enumerate(ts):
        eps_hat = eps_model(z, t)
        if eps_hat.shape != z.shape:
            raise ValueError(f"eps prediction shape {tuple(eps_hat.shape)} != latent shape {tuple(z.shape)}")
        abar_t = schedule.alpha_bars[t]
        z0_hat = (z - torch.sqrt(1.0 - abar_t) * eps_hat) / torch.sqrt(abar_t)
        if i + 1 == len(ts):
            return z0_hat
        abar_prev = schedule.alpha_bars[ts[i + 1]]
        z = torch.sqrt(abar_prev) * z0_hat + torch.sqrt(1.0 - abar_prev) * eps_hat
    return z


def guided_eps_model(cond: EpsModel, uncond: EpsModel, guidance_scale: float) -> EpsModel:
    """Classifier-free guidance: eps_u + g * (eps_c - eps_u).

    At g == 1 the unconditional branch cancels exactly, so it is skipped
    to save a forward pass.
    """

    if guidance_scale == 1.0:
        return cond

    def guided(z: torch.Tensor, t: int) -> torch.Tensor:
        eps_u = uncond(z, t)
        eps_c = cond(z, t)
        return eps_u + guidance_scale * (eps_c - eps_u)

    return guided
