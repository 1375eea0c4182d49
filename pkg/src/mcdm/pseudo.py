"""Pseudo ground truth: re-identification embeddings and dense flow.

Embeddings come from a small contrastive frame embedder; frames of the same
video are positives, frames of other videos negatives. Flow comes either from
an external model exported in the MCFL format or from the built-in exhaustive
block matcher.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FeatureRecord, FlowField, VideoClip
from .errors import ConfigurationError, PreconditionError, PseudoLabelMissingError
from .init import init_weights

log = logging.getLogger(__name__)


def embedding_key(video_id: str, frame_index: int) -> str:
    return f"{video_id}#{frame_index}"


def lookup_embedding(store: Mapping[str, np.ndarray], video_id: str, frame_index: int) -> np.ndarray:
    key = embedding_key(video_id, frame_index)
    try:
        return store[key]
    except KeyError:
        raise PseudoLabelMissingError(f"no pseudo embedding for key {key!r}") from None


# ---------------------------------------------------------------------------
# contrastive re-identification


def contrastive_loss(anchor: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """InfoNCE over cosine similarities.

    Shapes: anchor ``[N, D]``; positives ``[N, D]`` or ``[N, P, D]``; negatives
    ``[N, M, D]`` or ``[M, D]`` (shared by all anchors). With several
    positives, each one is scored against all negatives and the terms are
    averaged.
    """
    if temperature <= 0:
        raise PreconditionError(f"temperature must be positive, got {temperature}")
    if positives.dim() == 2:
        positives = positives.unsqueeze(1)
    if negatives.dim() == 2:
        negatives = negatives.unsqueeze(0).expand(anchor.shape[0], -1, -1)
    if positives.shape[1] < 1 or negatives.shape[1] < 1:
        raise PreconditionError("contrastive loss needs at least one positive and one negative per anchor")
    a = F.normalize(anchor, dim=-1).unsqueeze(1)
    s_pos = (a * F.normalize(positives, dim=-1)).sum(-1) / temperature  # [N, P]
    s_neg = (a * F.normalize(negatives, dim=-1)).sum(-1) / temperature  # [N, M]
    neg_lse = torch.logsumexp(s_neg, dim=1, keepdim=True)
    denom = torch.logaddexp(s_pos, neg_lse)
    return (denom - s_pos).mean()


class ReidEmbedder(nn.Module):
    """Frame -> unit-norm embedding."""

    def __init__(self, dim: int = 512, width: int = 32, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv2d(1, width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.ReLU(),
        )
        self.fc = nn.Linear(4 * width * 4, dim)
        init_weights(self, seed)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.features(frames - 0.5)
        x = F.adaptive_avg_pool2d(x, 2).flatten(1)
        return F.normalize(self.fc(x), dim=-1)


@dataclass
class ReidConfig:
    dim: int = 512
    temperature: float = 0.07
    steps: int = 300
    batch_videos: int = 16
    lr: float = 1e-3
    seed: int = 0


def train_reid(clips: Sequence[VideoClip], config: ReidConfig = ReidConfig(), log_every: int = 0):
    """Train the embedder; each step samples two frames from each of up to
    ``batch_videos`` distinct videos, and the other videos' frames act as negatives.

    Returns ``(model, losses)``.
    """
    if len(clips) < 2:
        raise ConfigurationError("re-identification training needs at least two videos to form negatives")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = ReidEmbedder(config.dim, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    frames = [torch.from_numpy(c.frames) for c in clips]
    nb = min(config.batch_videos, len(clips))
    losses = []
    for step in range(config.steps):
        vids = torch.randperm(len(clips), generator=gen)[:nb].tolist()
        a, p = [], []
        for v in vids:
            T = frames[v].shape[0]
            i, j = torch.randperm(T, generator=gen)[:2].tolist()
            a.append(frames[v][i])
            p.append(frames[v][j])
        za = model(torch.stack(a).unsqueeze(1))
        zp = model(torch.stack(p).unsqueeze(1))
        # negatives for anchor k: positives of every other video in the batch
        off_diag = ~torch.eye(nb, dtype=torch.bool)
        negatives = zp.unsqueeze(0).expand(nb, -1, -1)[off_diag].view(nb, nb - 1, -1)
        loss = contrastive_loss(za, zp, negatives, config.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("reid step %d loss %.4f", step, losses[-1])
    return model, losses


@torch.no_grad()
def embed_frames(model: ReidEmbedder, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    model.eval()
    x = torch.from_numpy(np.asarray(frames, dtype=np.float32)).unsqueeze(1)
    out = [model(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
    return torch.cat(out).numpy()


def embed_clips(model: ReidEmbedder, clips: Sequence[VideoClip]) -> list[FeatureRecord]:
    records = []
    for clip in clips:
        emb = embed_frames(model, clip.frames)
        records.extend(FeatureRecord(embedding_key(clip.id, t), e) for t, e in enumerate(emb))
    return records


def pool_appearance(deepest: torch.Tensor) -> torch.Tensor:
    """``[B, 2, C, h, w]`` -> unit-norm ``[B, 2, C]`` via global average pooling."""
    return F.normalize(deepest.mean(dim=(-2, -1)), dim=-1)


def reid_loss(deepest: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """MSE between pooled deepest-scale appearance and pseudo embeddings ``[B, 2, C]``."""
    pooled = pool_appearance(deepest)
    if pooled.shape != pseudo.shape:
        raise PreconditionError(f"pseudo embeddings {tuple(pseudo.shape)} do not match pooled features {tuple(pooled.shape)}")
    return F.mse_loss(pooled, pseudo)


# ---------------------------------------------------------------------------
# flow


def _displacements(search: int) -> list[tuple[int, int]]:
    cand = [(u, v) for u in range(-search, search + 1) for v in range(-search, search + 1)]
    return sorted(cand, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def block_match_flow(I0, I1, patch: int = 7, search: int = 4, stride: int = 1) -> FlowField:
    """Exhaustive SAD block matching from I0 to I1.

    For every pixel the integer displacement in ``[-search, search]^2`` with
    the smallest sum of absolute differences over a ``patch x patch`` window
    wins. Frames are edge-padded. SADs are rounded to 1e-9 so that ties are
    well defined; ties go to the smaller displacement norm, then to the
    lexicographically smaller (u, v). With ``stride > 1`` only every
    ``stride``-th pixel keeps its own match and the rest copy the nearest one.
    """
    I0 = np.asarray(I0, dtype=np.float64)
    I1 = np.asarray(I1, dtype=np.float64)
    if I0.shape != I1.shape or I0.ndim != 2:
        raise PreconditionError("block matching needs two frames of equal [H, W] shape")
    if patch % 2 == 0 or patch < 1:
        raise PreconditionError(f"patch must be odd, got {patch}")
    if search < 1:
        raise PreconditionError(f"search must be >= 1, got {search}")
    H, W = I0.shape
    if patch > min(H, W):
        raise PreconditionError(f"patch {patch} larger than frame {H}x{W}")
    r = patch // 2
    p0 = np.pad(I0, r, mode="edge")
    p1 = np.pad(I1, r + search, mode="edge")
    disps = _displacements(search)
    sads = np.empty((len(disps), H, W))
    for n, (u, v) in enumerate(disps):
        shifted = p1[search + v : search + v + H + 2 * r, search + u : search + u + W + 2 * r]
        diff = np.abs(p0 - shifted)
        # box sum over the patch via an integral image
        c = np.pad(diff.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        sads[n] = c[patch:, patch:] - c[:-patch, patch:] - c[patch:, :-patch] + c[:-patch, :-patch]
    best = np.argmin(np.round(sads, 9), axis=0)
    d = np.asarray(disps, dtype=np.float32)
    u, v = d[best, 0], d[best, 1]
    if stride > 1:
        yi = np.minimum(np.floor(np.arange(H) / stride + 0.5).astype(int) * stride, (H - 1) // stride * stride)
        xi = np.minimum(np.floor(np.arange(W) / stride + 0.5).astype(int) * stride, (W - 1) // stride * stride)
        u, v = u[np.ix_(yi, xi)], v[np.ix_(yi, xi)]
    return FlowField(u, v)


def resample_flow_tensor(flow: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of ``[B, 2, H, W]`` flows with displacement rescaling."""
    H, W = flow.shape[-2:]
    if (H, W) == (height, width):
        return flow
    out = F.interpolate(flow, size=(height, width), mode="bilinear", align_corners=False)
    scale = out.new_tensor([width / W, height / H]).view(1, 2, 1, 1)
    return out * scale


def resample_flow(f: FlowField, height: int, width: int) -> FlowField:
    if height < 2 or width < 2:
        raise PreconditionError(f"target size must be >= 2, got {height}x{width}")
    if f.shape == (height, width):
        return FlowField(f.u.copy(), f.v.copy(), f.valid_mask)
    t = torch.from_numpy(f.as_array()).unsqueeze(0).double()
    out = resample_flow_tensor(t, height, width)[0].float().numpy()
    mask = None
    if f.valid_mask is not None:
        m = torch.from_numpy(f.valid_mask.astype(np.float32))[None, None]
        mask = F.interpolate(m, size=(height, width), mode="nearest")[0, 0].numpy() > 0.5
    return FlowField(out[0], out[1], mask)


def midpoint_targets(pseudo: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear-motion split of an I0->I1 flow into the two middle-frame warps."""
    return -0.5 * pseudo, 0.5 * pseudo


def flow_loss(flow_t0: torch.Tensor, flow_t1: torch.Tensor, pseudo: torch.Tensor, valid_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Masked MSE of the predicted middle-frame flows against the split pseudo flow.

    ``flow_t0``/``flow_t1`` are ``[B, 2, h, w]``; ``pseudo`` is ``[B, 2, H, W]``
    (I0 -> I1, pixels); ``valid_mask`` is ``[B, 1, H, W]`` or ``None``.
    """
    h, w = flow_t0.shape[-2:]
    target_t0, target_t1 = midpoint_targets(resample_flow_tensor(pseudo, h, w))
    sq = (flow_t0 - target_t0) ** 2 + (flow_t1 - target_t1) ** 2  # [B, 2, h, w]
    if valid_mask is None:
        return sq.sum() / (4 * sq[:, 0].numel())
    m = valid_mask.to(sq.dtype)
    if m.shape[-2:] != (h, w):
        m = (F.interpolate(m, size=(h, w), mode="nearest") > 0.5).to(sq.dtype)
    count = m.sum()
    if count == 0:
        warnings.warn("flow loss: valid mask excludes every pixel; returning 0", RuntimeWarning, stacklevel=2)
        return sq.sum() * 0.0
    return (sq * m).sum() / (4 * count)
