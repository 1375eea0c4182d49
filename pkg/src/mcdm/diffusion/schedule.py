"""DDPM noise schedule and forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import PreconditionError


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients indexed by step ``t = 1..T``; index 0 is the clean endpoint.

    ``betas[0]`` is 0 and ``alpha_bar[0]`` is 1 so that ``t = 0`` means no noise.
    """

    betas: np.ndarray  # float64, length T + 1

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bar
        var = np.zeros_like(ab)
        var[1:] = self.betas[1:] * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        return var


def make_noise_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if num_steps < 2:
        raise PreconditionError(f"need at least 2 diffusion steps, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise PreconditionError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise PreconditionError(f"unsupported schedule kind {kind!r}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)])
    return NoiseSchedule(betas)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    c = torch.as_tensor(values, dtype=torch.float64)[t].to(like.dtype)
    if c.dim() == 0:
        return c
    return c.view(-1, *([1] * (like.dim() - 1)))


def q_sample(z0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-sample ``[B]`` tensor."""
    if z0.shape != noise.shape:
        raise PreconditionError(f"noise shape {tuple(noise.shape)} differs from latent shape {tuple(z0.shape)}")
    tt = torch.as_tensor(t)
    if tt.min() < 0 or tt.max() > schedule.num_steps:
        raise PreconditionError(f"step must lie in [0, {schedule.num_steps}]")
    ab = schedule.alpha_bar
    return _coef(np.sqrt(ab), t, z0) * z0 + _coef(np.sqrt(1.0 - ab), t, z0) * noise
