"""Seeded weight initialisation shared by every network in the package."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def init_weights(module: nn.Module, seed: int) -> None:
    """Fan-in scaled normal init for conv/linear layers from a private generator."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
