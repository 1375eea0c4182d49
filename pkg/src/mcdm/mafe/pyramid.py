"""Laplacian pyramid and the reconstruction losses built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import NumericalError, PreconditionError

BINOMIAL_5 = (1.0, 4.0, 6.0, 4.0, 1.0)


def _kernel(x: torch.Tensor, gain: float = 1.0) -> torch.Tensor:
    k = torch.tensor(BINOMIAL_5, dtype=x.dtype, device=x.device) * (gain / 16.0)
    return k


def _as_4d(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = x.shape[:-2]
    return x.reshape(-1, 1, *x.shape[-2:]), lead


def gaussian_blur(x: torch.Tensor, gain: float = 1.0) -> torch.Tensor:
    """Separable 5-tap binomial filter with mirror padding (edge not repeated).

    ``gain`` multiplies each 1D pass; ``gain=2`` is the interpolation filter
    used after zero insertion.
    """
    x4, lead = _as_4d(x)
    k = _kernel(x4, gain)
    x4 = F.pad(x4, (2, 2, 0, 0), mode="reflect")
    x4 = F.conv2d(x4, k.view(1, 1, 1, 5))
    x4 = F.pad(x4, (0, 0, 2, 2), mode="reflect")
    x4 = F.conv2d(x4, k.view(1, 1, 5, 1))
    return x4.reshape(*lead, *x4.shape[-2:])


def downsample(x: torch.Tensor) -> torch.Tensor:
    """Blur then keep every second row and column."""
    return gaussian_blur(x)[..., ::2, ::2]


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Zero insertion to ``2h x 2w`` followed by the gain-2 filter, cropped to ``size``."""
    h, w = x.shape[-2:]
    up = x.new_zeros(*x.shape[:-2], 2 * h, 2 * w)
    up[..., ::2, ::2] = x
    return gaussian_blur(up, gain=2.0)[..., : size[0], : size[1]]


def _check_levels(shape, levels: int):
    if levels < 1:
        raise PreconditionError(f"pyramid needs at least one level, got {levels}")
    if min(shape[-2:]) / 2**levels < 2:
        raise PreconditionError(f"image of size {tuple(shape[-2:])} is too small for {levels} pyramid levels")


def laplacian_pyramid(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Detail maps ``G_l - up(down(G_l))`` for l < levels, then the coarse ``G_L``.

    Works on any tensor whose last two dims are (H, W).
    """
    _check_levels(image.shape, levels)
    out = []
    current = image
    for _ in range(levels):
        coarse = downsample(current)
        out.append(current - upsample(coarse, current.shape[-2:]))
        current = coarse
    out.append(current)
    return out


def reconstruct(pyramid: list[torch.Tensor]) -> torch.Tensor:
    image = pyramid[-1]
    for detail in reversed(pyramid[:-1]):
        image = detail + upsample(image, detail.shape[-2:])
    return image


def laplacian_loss(pred: torch.Tensor, target: torch.Tensor, levels: int = 3) -> torch.Tensor:
    """Sum over pyramid levels of the mean absolute difference at that level."""
    if pred.shape != target.shape:
        raise PreconditionError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = pred.new_zeros(())
    for a, b in zip(laplacian_pyramid(pred, levels), laplacian_pyramid(target, levels)):
        loss = loss + (a - b).abs().mean()
    return loss


@dataclass(frozen=True)
class LossWeights:
    reid: float = 1.0  # lambda_1
    flow: float = 0.01  # lambda_2

    def __post_init__(self):
        if self.reid < 0 or self.flow < 0:
            raise PreconditionError(f"loss weights must be non-negative, got {self}")


def _is_nan(value) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isnan(value).any())
    return math.isnan(value)


def total_loss(l_lap, l_reid, l_flow, weights: LossWeights = LossWeights()):
    """``l_lap + reid * l_reid + flow * l_flow``."""
    for name, value in (("laplacian", l_lap), ("reid", l_reid), ("flow", l_flow)):
        if _is_nan(value):
            raise NumericalError(f"{name} loss term is NaN")
    return l_lap + weights.reid * l_reid + weights.flow * l_flow
