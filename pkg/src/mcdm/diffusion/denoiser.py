"""Spatio-temporal U-Net that predicts diffusion noise on latent clips.

Every residual block runs a spatial convolution pair, a feature-wise
modulation from the (timestep + motion) embedding, and then temporal
self-attention across frames. Temporal layers use sinusoidal frame
positions, so a model trained on short clips can sample longer ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, PreconditionError


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    residual_blocks: int = 4
    temporal_attention: bool = True
    conditioning_dim: int = 1536
    embed_dim: int = 128
    heads: int = 4
    conditioning: str = "modulation"

    def __post_init__(self):
        if self.residual_blocks < 2:
            raise ConfigurationError(f"denoiser needs at least 2 residual blocks, got {self.residual_blocks}")
        if self.conditioning != "modulation":
            raise ConfigurationError(f"conditioning mode {self.conditioning!r} is not implemented; use 'modulation'")


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """``[N]`` positions -> ``[N, dim]`` sin/cos features with geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class TemporalAttention(nn.Module):
    """Self-attention over the frame axis at every spatial location."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            heads = 1
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor, frames: int) -> torch.Tensor:
        BT, C, H, W = x.shape
        B = BT // frames
        seq = x.view(B, frames, C, H, W).permute(0, 3, 4, 1, 2).reshape(B * H * W, frames, C)
        pos = sinusoidal_embedding(torch.arange(frames), C).to(x.dtype)
        h = self.norm(seq) + pos[None]
        out, _ = self.attn(h, h, h, need_weights=False)
        seq = seq + out
        return seq.view(B, H, W, frames, C).permute(0, 3, 4, 1, 2).reshape(BT, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int, heads: int, temporal: bool):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, 1, 1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.film = nn.Linear(embed_dim, 2 * c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.temporal = TemporalAttention(c_out, heads) if temporal else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor, frames: int) -> torch.Tensor:
        # emb is per clip [B, E]; features are per frame [B*T, C, H, W]
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(emb).repeat_interleave(frames, dim=0)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        h = self.skip(x) + h
        if self.temporal is not None:
            h = self.temporal(h, frames)
        return h


class SpatioTemporalUNet(nn.Module):
    """One down/up level: the first block at full latent resolution, the middle
    ``residual_blocks - 2`` at half resolution, the last back at full resolution
    with a skip from the first."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        C, E = cfg.base_channels, cfg.embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.cond_mlp = nn.Sequential(nn.Linear(cfg.conditioning_dim, E), nn.SiLU(), nn.Linear(E, E))
        self.null_cond = nn.Parameter(torch.zeros(E))
        # standardisation of raw motion vectors, fitted on the training store
        self.register_buffer("cond_mean", torch.zeros(cfg.conditioning_dim))
        self.register_buffer("cond_std", torch.ones(cfg.conditioning_dim))
        self.inp = nn.Conv2d(cfg.latent_channels, C, 3, 1, 1)
        args = (E, cfg.heads, cfg.temporal_attention)
        self.first = ResBlock(C, C, *args)
        self.down = nn.Conv2d(C, 2 * C, 3, 2, 1)
        self.middle = nn.ModuleList(ResBlock(2 * C, 2 * C, *args) for _ in range(cfg.residual_blocks - 2))
        self.up = nn.Conv2d(2 * C, C, 3, 1, 1)
        self.last = ResBlock(2 * C, C, *args)
        self.out_norm = nn.GroupNorm(_groups(C), C)
        self.out = nn.Conv2d(C, cfg.latent_channels, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def set_condition_stats(self, vectors: np.ndarray) -> None:
        v = torch.as_tensor(np.asarray(vectors, dtype=np.float32))
        self.cond_mean.copy_(v.mean(0))
        self.cond_std.copy_(v.std(0, unbiased=False).clamp_min(1e-6) if len(v) > 1 else torch.ones_like(v[0]))

    def embed(self, t: torch.Tensor, cond: torch.Tensor | None, drop: torch.Tensor | None = None) -> torch.Tensor:
        """Timestep plus condition embedding ``[B, E]``; ``drop`` marks clips that get the null embedding."""
        B = t.shape[0]
        dtype = self.null_cond.dtype
        emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.embed_dim).to(dtype))
        if cond is None:
            return emb + self.null_cond.expand(B, -1)
        if cond.dim() != 2 or cond.shape[1] != self.cfg.conditioning_dim:
            raise PreconditionError(f"condition must be [B, {self.cfg.conditioning_dim}], got {tuple(cond.shape)}")
        c = self.cond_mlp(((cond.to(dtype) - self.cond_mean) / self.cond_std))
        if drop is not None:
            c = torch.where(drop[:, None], self.null_cond.expand(B, -1), c)
        return emb + c

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None, drop: torch.Tensor | None = None) -> torch.Tensor:
        """``z`` is ``[B, T, C_z, h, w]`` with even ``h, w``; ``t`` is ``[B]``; returns predicted noise."""
        if z.dim() != 5:
            raise PreconditionError(f"expected latents [B, T, C, h, w], got {tuple(z.shape)}")
        B, T, Cz, H, W = z.shape
        if H % 2 or W % 2:
            raise PreconditionError(f"latent size must be even, got {H}x{W}")
        emb = self.embed(t, cond, drop)
        x = self.inp(z.reshape(B * T, Cz, H, W))
        s = self.first(x, emb, T)
        x = self.down(s)
        for block in self.middle:
            x = block(x, emb, T)
        x = self.up(F.interpolate(x, size=(H, W), mode="nearest"))
        x = self.last(torch.cat([x, s], dim=1), emb, T)
        return self.out(F.silu(self.out_norm(x))).view(B, T, Cz, H, W)


def denoise_predict(model: SpatioTemporalUNet, z_t, t: int, cond=None) -> torch.Tensor:
    """Unbatched convenience wrapper: ``[T, C_z, h, w]`` in, noise estimate of the same shape out."""
    z = torch.as_tensor(np.asarray(z_t) if not torch.is_tensor(z_t) else z_t)
    c = None if cond is None else torch.as_tensor(np.asarray(cond, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        return model(z[None].to(model.null_cond.dtype), torch.tensor([int(t)]), c)[0]
