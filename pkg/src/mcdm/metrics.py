"""Image, video and flow quality metrics.

Frechet distances depend on the embedder; every value produced here is tagged
with the embedder that produced it and is not comparable with numbers computed
on Inception or I3D features.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FlowField
from .errors import NumericalError, PreconditionError

PSNR_INF = math.inf


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise PreconditionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, max_val: float = 1.0, C1: float | None = None, C2: float | None = None) -> float:
    """Mean SSIM over all fully contained Gaussian windows of a 2D image pair."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape or a.ndim != 2:
        raise PreconditionError(f"ssim needs two 2D images of equal shape, got {a.shape} and {b.shape}")
    if window % 2 == 0:
        raise PreconditionError(f"ssim window must be odd, got {window}")
    if min(a.shape) < window:
        raise PreconditionError(f"image {a.shape} smaller than ssim window {window}")
    C1 = (0.01 * max_val) ** 2 if C1 is None else C1
    C2 = (0.03 * max_val) ** 2 if C2 is None else C2
    w = gaussian_window(window, sigma)
    view = np.lib.stride_tricks.sliding_window_view

    def filt(x):
        return np.einsum("ijkl,kl->ij", view(x, (window, window)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise PreconditionError(f"covariance shape {self.sigma.shape} does not match mean dim {d}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8, rtol=0):
            raise PreconditionError("covariance is not symmetric")
        if self.n < 2:
            raise PreconditionError(f"need at least 2 samples, got {self.n}")

    @classmethod
    def from_samples(cls, x) -> "GaussianStats":
        x = _np(x)
        if x.ndim != 2 or x.shape[0] < 2:
            raise PreconditionError(f"need an [n >= 2, d] sample matrix, got {x.shape}")
        sigma = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), (sigma + sigma.T) / 2.0, x.shape[0])


def _psd_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if vals.min(initial=0.0) < -1e-6:
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3e} < -1e-6; not positive semi-definite")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """``|mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S_p^(1/2) S_q S_p^(1/2)``.
    """
    if p.mu.shape != q.mu.shape:
        raise PreconditionError(f"dimension mismatch: {p.mu.shape[0]} vs {q.mu.shape[0]}")
    vals, vecs = _psd_eigvals(p.sigma, "first covariance")
    sqrt_p = (vecs * np.sqrt(vals)) @ vecs.T
    inner = sqrt_p @ q.sigma @ sqrt_p
    inner_vals, _ = _psd_eigvals(inner, "covariance product")
    tr_sqrt = float(np.sqrt(inner_vals).sum())
    diff = p.mu - q.mu
    d = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2.0 * tr_sqrt)
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# embedders


class RandomVideoEmbedder(nn.Module):
    """Frozen, seeded random-projection spatio-temporal conv embedder.

    Maps a clip ``[T, H, W]`` to a feature vector. Output is the concatenation
    of mean and standard deviation of the final activations, so both average
    appearance and temporal variability register.
    """

    name = "random-conv3d"

    def __init__(self, seed: int = 0, width: int = 16, dim: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.convs = nn.ModuleList(
            [nn.Conv3d(1, width, (3, 5, 5), (1, 2, 2), (1, 2, 2)), nn.Conv3d(width, dim // 2, (3, 3, 3), (1, 2, 2), (1, 1, 1))]
        )
        for conv in self.convs:
            fan_in = conv.weight[0].numel()
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @property
    def tag(self) -> str:
        return f"{self.name}(seed={self.seed})"

    @torch.no_grad()
    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips.float().unsqueeze(1) - 0.5  # [B, 1, T, H, W]
        x = F.relu(self.convs[0](x))
        x = F.relu(self.convs[1](x))
        return torch.cat([x.mean(dim=(2, 3, 4)), x.std(dim=(2, 3, 4))], dim=1)

    def embed(self, clip) -> np.ndarray:
        t = torch.as_tensor(np.asarray(clip, dtype=np.float32)).unsqueeze(0)
        return self(t)[0].double().numpy()


class RandomFrameEmbedder(RandomVideoEmbedder):
    """Per-frame variant used for FID-style statistics (clip length 1)."""

    name = "random-conv2d"

    def embed(self, frame) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float32)[None]
        return super().embed(np.repeat(f, 3, axis=0))


def window_starts(T: int, clip_len: int, count: int) -> list[int]:
    """``count`` uniformly spaced window starts in ``[0, T - clip_len]``."""
    last = T - clip_len
    if count <= 1 or last == 0:
        return [0]
    return sorted({int(round(x)) for x in np.linspace(0, last, count)})


def clip_windows(clips: Sequence[np.ndarray], clip_len: int, windows_per_clip: int = 1) -> list[np.ndarray]:
    out = []
    for clip in clips:
        clip = np.asarray(clip)
        if clip.shape[0] < clip_len:
            continue
        for s in window_starts(clip.shape[0], clip_len, windows_per_clip):
            out.append(clip[s : s + clip_len])
    return out


def fvd(real_clips, fake_clips, embedder: Callable | None = None, clip_len: int = 16, windows_per_clip: int = 1) -> float:
    """Frechet distance between embedded fixed-length windows of two clip sets.

    Clips shorter than ``clip_len`` are skipped; if a side ends up with fewer
    than two windows the call fails.
    """
    embedder = embedder or RandomVideoEmbedder()
    embed = embedder.embed if hasattr(embedder, "embed") else embedder
    sides = []
    for name, clips in (("real", real_clips), ("fake", fake_clips)):
        wins = clip_windows(clips, clip_len, windows_per_clip)
        if len(wins) < 2:
            raise PreconditionError(f"fvd: fewer than 2 {name} clips with at least {clip_len} frames; all skipped")
        sides.append(GaussianStats.from_samples(np.stack([embed(w) for w in wins])))
    return frechet_distance(*sides)


def fid(real_frames, fake_frames, embedder: Callable | None = None) -> float:
    embedder = embedder or RandomFrameEmbedder()
    embed = embedder.embed if hasattr(embedder, "embed") else embedder
    real = GaussianStats.from_samples(np.stack([embed(f) for f in real_frames]))
    fake = GaussianStats.from_samples(np.stack([embed(f) for f in fake_frames]))
    return frechet_distance(real, fake)


# ---------------------------------------------------------------------------
# inception score


def inception_score(class_probs, folds: int = 10) -> tuple[float, float]:
    """``exp(mean_x KL(p(y|x) || p(y)))`` over all rows, with the std across folds."""
    p = _np(class_probs)
    if p.ndim != 2 or p.shape[0] < 1:
        raise PreconditionError(f"class_probs must be an [N, K] matrix, got {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise PreconditionError("class_probs rows must be probability vectors summing to 1")

    def score(block):
        marginal = block.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(block > 0, block * (np.log(block) - np.log(marginal)), 0.0).sum(axis=1)
        return float(np.exp(kl.mean()))

    value = score(p)
    n_folds = max(1, min(folds, p.shape[0]))
    fold_scores = [score(chunk) for chunk in np.array_split(p, n_folds)]
    return value, float(np.std(fold_scores))


class MotionClassifier(nn.Module):
    """Small spatio-temporal classifier whose softmax feeds the inception score."""

    name = "phantom-motion-classifier"

    def __init__(self, num_classes: int, width: int = 16, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv3d(1, width, 3, (1, 2, 2), 1), nn.ReLU(),
            nn.Conv3d(width, width, 3, (1, 2, 2), 1), nn.ReLU(),
            nn.AdaptiveAvgPool3d(1), nn.Flatten(), nn.Linear(width, num_classes),
        )

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips.unsqueeze(1) - 0.5
        diff = torch.cat([x[:, :, 1:] - x[:, :, :-1], torch.zeros_like(x[:, :, :1])], dim=2)
        return self.net(diff * 4.0 + x)

    @torch.no_grad()
    def probs(self, clips) -> np.ndarray:
        self.eval()
        x = torch.as_tensor(np.asarray(clips, dtype=np.float32))
        return torch.softmax(self(x).double(), dim=1).numpy()


def train_motion_classifier(clips: Sequence[np.ndarray], labels: Sequence[int], clip_len: int, steps: int = 200, seed: int = 0) -> MotionClassifier:
    labels = np.asarray(labels)
    model = MotionClassifier(int(labels.max()) + 1, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    data = [torch.as_tensor(np.asarray(c, dtype=np.float32)) for c in clips]
    y_all = torch.as_tensor(labels, dtype=torch.long)
    for _ in range(steps):
        idx = torch.randint(len(data), (min(16, len(data)),), generator=gen)
        batch = []
        for i in idx.tolist():
            T = data[i].shape[0]
            s = int(torch.randint(T - clip_len + 1, (1,), generator=gen))
            batch.append(data[i][s : s + clip_len])
        loss = F.cross_entropy(model(torch.stack(batch)), y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


# ---------------------------------------------------------------------------
# flow


def endpoint_error(f: FlowField, g: FlowField, mask=None) -> float:
    """Mean Euclidean flow difference over pixels selected by ``mask`` (or f's valid mask)."""
    if f.shape != g.shape:
        raise PreconditionError(f"flow shape mismatch: {f.shape} vs {g.shape}")
    err = np.sqrt((f.u.astype(np.float64) - g.u) ** 2 + (f.v.astype(np.float64) - g.v) ** 2)
    if mask is None:
        mask = f.valid_mask if f.valid_mask is not None else g.valid_mask
    if mask is None:
        return float(err.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("endpoint_error: mask excludes every pixel; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(err[mask].mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Named metric values (with optional std) plus the context needed to read them."""

    name: str
    metrics: dict[str, tuple[float, float | None]] = field(default_factory=dict)
    embedders: dict[str, str] = field(default_factory=dict)
    clip_lengths: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""

    def add(self, metric: str, value: float, std: float | None = None, embedder: str = "n/a", clip_len: int = 1):
        self.metrics[metric] = (float(value), None if std is None else float(std))
        self.embedders[metric] = embedder
        self.clip_lengths[metric] = int(clip_len)

    def to_text(self) -> str:
        lines = [f"report = {self.name}", f"config_hash = {self.config_hash}"]
        for k, (v, s) in self.metrics.items():
            std = "" if s is None else f" +- {s:.6g}"
            lines.append(f"{k} = {v:.6g}{std}  [embedder={self.embedders[k]}, clip_len={self.clip_lengths[k]}]")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "metrics": {k: {"value": v, "std": s, "embedder": self.embedders[k], "clip_len": self.clip_lengths[k]} for k, (v, s) in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rep = cls(d["name"], config_hash=d.get("config_hash", ""))
        for k, m in d["metrics"].items():
            rep.add(k, m["value"], m.get("std"), m.get("embedder", "n/a"), m.get("clip_len", 1))
        return rep

    def save(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt = directory / f"{self.name}.txt"
        js = directory / f"{self.name}.json"
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))
        return txt, js

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def render_comparison(reports: Sequence[MetricReport]) -> str:
    """Markdown table with one row per report and one column per metric."""
    names = []
    for r in reports:
        names.extend(k for k in r.metrics if k not in names)
    header = "| run | " + " | ".join(names) + " |"
    rule = "|" + "---|" * (len(names) + 1)
    rows = [header, rule]
    for r in reports:
        cells = []
        for k in names:
            if k not in r.metrics:
                cells.append("-")
                continue
            v, s = r.metrics[k]
            cells.append(f"{v:.4g}" + ("" if s is None else f" ± {s:.2g}"))
        rows.append(f"| {r.name} | " + " | ".join(cells) + " |")
    return "\n".join(rows) + "\n"
