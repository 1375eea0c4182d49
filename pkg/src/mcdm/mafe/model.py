"""Motion-appearance feature extractor.

Two frames go through a shared convolutional encoder (four scales, channels
64/128/256/512 by default, resolutions H/2, H/2, H/4, H/8). On the two deepest
scales a local inter-frame attention relates every location of one frame to a
window of the other frame; the attention-weighted coordinate offsets and
neighbour appearance are projected to the motion features F01 / F10. A small
convolutional head turns motion, appearance and the raw frames into two
intermediate flows, a blend mask and a residual that compose the middle frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import PreconditionError
from ..init import init_weights

DEFAULT_CHANNELS = (64, 128, 256, 512)
MOTION_SCALES = (2, 3)


def coordinate_grid(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """``[2, H, W]`` grid; channel 0 is x in [-1, 1] along width, channel 1 is y."""
    if height < 2 or width < 2:
        raise PreconditionError(f"coordinate grid needs H, W >= 2, got {height}x{width}")
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])


def window_mask(height: int, width: int, window: int, device=None) -> torch.Tensor:
    """``[N, N]`` boolean mask, True where location q lies in the window around p."""
    r = window // 2
    ys, xs = torch.meshgrid(torch.arange(height, device=device), torch.arange(width, device=device), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    return ((ys[:, None] - ys[None, :]).abs() <= r) & ((xs[:, None] - xs[None, :]).abs() <= r)


def local_attention(query, key, value, coords, window: int):
    """Scaled dot-product attention of each query location over a window of the other map.

    Neighbours outside the map are dropped, so border windows are clamped.
    Evaluated as dense attention under a window mask, which keeps the
    aggregation a matrix product.

    Args:
        query, key: ``[B, Cq, H, W]``.
        value: ``[B, Cv, H, W]``.
        coords: ``[2, H, W]`` coordinate grid.
        window: odd neighbourhood size.

    Returns:
        ``(weights [B, N, N], offset [B, 2, H, W], aggregated [B, Cv, H, W])``
        with ``N = H * W``; ``offset`` is the expected ``coords[q] - coords[p]``.
    """
    if window < 3 or window % 2 == 0:
        raise PreconditionError(f"attention window must be odd and >= 3, got {window}")
    B, Cq, H, W = query.shape
    q = query.flatten(2).transpose(1, 2)  # [B, N, Cq]
    k = key.flatten(2)  # [B, Cq, N]
    logits = torch.bmm(q, k) / math.sqrt(Cq)
    mask = window_mask(H, W, window, query.device)
    logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)

    grid = coords.to(dtype=query.dtype, device=query.device).flatten(1)  # [2, N]
    expected = torch.matmul(weights, grid.t())  # [B, N, 2]
    offset = (expected - grid.t()).transpose(1, 2).reshape(B, 2, H, W)
    aggregated = torch.bmm(value.flatten(2), weights.transpose(1, 2)).reshape(B, -1, H, W)
    return weights, offset, aggregated


class AppearanceEncoder(nn.Module):
    def __init__(self, channels=DEFAULT_CHANNELS):
        super().__init__()
        if len(channels) != 4:
            raise PreconditionError(f"encoder expects 4 channel entries, got {channels}")
        c0, c1, c2, c3 = channels
        strides = (2, 1, 2, 2)
        ins = (1, c0, c1, c2)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(i, o, 3, s, 1), nn.PReLU(o)) for i, o, s in zip(ins, channels, strides)
        )

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        x = frames - 0.5
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class InterFrameMotion(nn.Module):
    """Directional motion features for one scale."""

    def __init__(self, channels: int, window: int = 7):
        super().__init__()
        self.window = window
        key_dim = max(channels // 4, 16)
        self.query = nn.Conv2d(channels, key_dim, 1)
        self.key = nn.Conv2d(channels, key_dim, 1)
        self.proj = nn.Conv2d(2 + channels, channels, 1)

    def forward(self, fa: torch.Tensor, fb: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        H, W = fa.shape[-2:]
        _, offset, agg = local_attention(self.query(fa), self.key(fb), fb, coords, self.window)
        # offsets in feature cells so the projection sees O(1) inputs
        cells = offset * offset.new_tensor([(W - 1) / 2.0, (H - 1) / 2.0]).view(1, 2, 1, 1)
        return self.proj(torch.cat([cells, agg - fa], dim=1))


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp ``out(p) = image(p + flow(p))`` with border clamping.

    ``image`` is ``[B, C, H, W]``, ``flow`` is ``[B, 2, H, W]`` in pixels (u, v).
    """
    B, _, H, W = image.shape
    ys = torch.arange(H, dtype=image.dtype, device=image.device).view(1, H, 1)
    xs = torch.arange(W, dtype=image.dtype, device=image.device).view(1, 1, W)
    gx = (xs + flow[:, 0]) * (2.0 / (W - 1)) - 1.0
    gy = (ys + flow[:, 1]) * (2.0 / (H - 1)) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)


def compose_middle(I0, I1, flow_t0, flow_t1, mask, residual) -> torch.Tensor:
    """``clamp(m * warp(I0, f_t0) + (1 - m) * warp(I1, f_t1) + r, 0, 1)``; all ``[B, C, H, W]``."""
    blended = mask * warp(I0, flow_t0) + (1.0 - mask) * warp(I1, flow_t1)
    return torch.clamp(blended + residual, 0.0, 1.0)


@dataclass
class MiddlePrediction:
    frame: torch.Tensor  # [B, 1, H, W]
    flow_t0: torch.Tensor  # [B, 2, H, W]
    flow_t1: torch.Tensor
    mask: torch.Tensor  # [B, 1, H, W]
    residual: torch.Tensor


@dataclass
class MAFEOutput:
    appearance: list[torch.Tensor]  # per scale [B, 2, C, H, W]
    motion: list[torch.Tensor]  # scales 2 and 3, [B, 2, C, H, W] with index 0 = F01
    prediction: MiddlePrediction | None


def _pair_cat(x: torch.Tensor) -> torch.Tensor:
    # [B, 2, C, H, W] -> [B, 2C, H, W]
    return x.flatten(1, 2)


class SynthesisHead(nn.Module):
    def __init__(self, channels=DEFAULT_CHANNELS, width: int = 32):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.reduce3 = nn.Conv2d(2 * c3, 2 * width, 1)
        self.reduce2 = nn.Conv2d(2 * c2 + 2 * c2 + 2 * width, 2 * width, 1)
        self.fuse2 = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, 1, 1), nn.PReLU(2 * width))
        self.fuse1 = nn.Sequential(nn.Conv2d(2 * width + 2 * c1, width, 3, 1, 1), nn.PReLU(width))
        self.fuse0 = nn.Sequential(nn.Conv2d(width + 2, width, 3, 1, 1), nn.PReLU(width))
        self.out = nn.Conv2d(width, 6, 3, 1, 1)

    def zero_output(self):
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, I0, I1, motion, appearance) -> MiddlePrediction:
        H, W = I0.shape[-2:]
        m2, m3 = motion
        x = self.reduce3(_pair_cat(m3))
        x = F.interpolate(x, size=m2.shape[-2:], mode="bilinear", align_corners=False)
        x = self.reduce2(torch.cat([x, _pair_cat(m2), _pair_cat(appearance[2])], dim=1))
        x = self.fuse2(x)
        x = F.interpolate(x, size=appearance[1].shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse1(torch.cat([x, _pair_cat(appearance[1])], dim=1))
        x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
        x = self.fuse0(torch.cat([x, I0, I1], dim=1))
        out = self.out(x)
        flow_t0, flow_t1 = out[:, 0:2], out[:, 2:4]
        mask = torch.sigmoid(out[:, 4:5])
        residual = out[:, 5:6]
        frame = compose_middle(I0, I1, flow_t0, flow_t1, mask, residual)
        return MiddlePrediction(frame, flow_t0, flow_t1, mask, residual)


class MAFE(nn.Module):
    def __init__(self, channels=DEFAULT_CHANNELS, window: int = 7, head_width: int = 32, seed: int = 0,
                 zero_head: bool = False):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        self.window = window
        self.encoder = AppearanceEncoder(self.channels)
        self.motion_layers = nn.ModuleList(InterFrameMotion(self.channels[s], window) for s in MOTION_SCALES)
        self.head = SynthesisHead(self.channels, head_width)
        init_weights(self, seed)
        if zero_head:  # start exactly at the blend baseline
            self.head.zero_output()

    @property
    def motion_dim(self) -> int:
        return sum(2 * self.channels[s] for s in MOTION_SCALES)

    @staticmethod
    def _check_frames(I0, I1):
        if I0.shape != I1.shape:
            raise PreconditionError(f"frame shapes differ: {tuple(I0.shape)} vs {tuple(I1.shape)}")
        if I0.shape[-1] % 8 or I0.shape[-2] % 8:
            raise PreconditionError(f"frame size must be divisible by 8, got {tuple(I0.shape[-2:])}")

    def encode_appearance(self, I0: torch.Tensor, I1: torch.Tensor) -> list[torch.Tensor]:
        """Shared-weight encoding; frames ``[B, 1, H, W]`` -> per scale ``[B, 2, C, h, w]``."""
        self._check_frames(I0, I1)
        B = I0.shape[0]
        feats = self.encoder(torch.cat([I0, I1], dim=0))
        return [torch.stack([f[:B], f[B:]], dim=1) for f in feats]

    def inter_frame_motion(self, appearance: list[torch.Tensor]) -> list[torch.Tensor]:
        out = []
        for layer, s in zip(self.motion_layers, MOTION_SCALES):
            f0, f1 = appearance[s][:, 0], appearance[s][:, 1]
            H, W = f0.shape[-2:]
            coords = coordinate_grid(H, W, dtype=f0.dtype)
            B = f0.shape[0]
            both = layer(torch.cat([f0, f1]), torch.cat([f1, f0]), coords)
            out.append(torch.stack([both[:B], both[B:]], dim=1))
        return out

    def forward(self, I0: torch.Tensor, I1: torch.Tensor, synthesize: bool = True) -> MAFEOutput:
        appearance = self.encode_appearance(I0, I1)
        motion = self.inter_frame_motion(appearance)
        pred = self.head(I0, I1, motion, appearance) if synthesize else None
        return MAFEOutput(appearance, motion, pred)


def extract_motion_vector(motion: list[torch.Tensor]) -> torch.Tensor:
    """Pool each motion scale over (H, W) and flatten direction-major; ``[B, sum 2 C_s]``."""
    if len(motion) != 2:
        raise PreconditionError(f"expected two motion scales, got {len(motion)}")
    return torch.cat([m.mean(dim=(-2, -1)).flatten(1) for m in motion], dim=1)
