"""Per-frame variational autoencoder providing the diffusion latent space."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data import FeatureRecord, read_feature_store, write_feature_store
from ..errors import NumericalError, PreconditionError, StoreFormatError
from ..init import init_weights

log = logging.getLogger(__name__)

DOWNSAMPLE = 4


@dataclass
class LatentVideo:
    """Latents ``[T, C_z, h, w]`` of one clip plus the geometry needed to decode them."""

    tensor: np.ndarray
    factor: int = DOWNSAMPLE
    channels: int = 4

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float32)
        if self.tensor.ndim != 4 or self.tensor.shape[1] != self.channels:
            raise PreconditionError(f"latent video must be [T, {self.channels}, h, w], got {self.tensor.shape}")
        if not np.isfinite(self.tensor).all():
            raise NumericalError("latent video contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.tensor.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.tensor.shape[2] * self.factor, self.tensor.shape[3] * self.factor


class VAE(nn.Module):
    """Two stride-2 stages each way, so ``H x W`` frames map to ``C_z x H/4 x W/4``."""

    factor = DOWNSAMPLE

    def __init__(self, latent_channels: int = 4, width: int = 32, seed: int = 0):
        super().__init__()
        self.latent_channels = latent_channels
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * latent_channels, 3, 1, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, 2 * w, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(w, 1, 3, 1, 1),
        )
        init_weights(self, seed)
        # multiplies latent means so the diffusion model sees roughly unit variance
        self.register_buffer("scale_factor", torch.tensor(1.0))

    def encode(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``[N, 1, H, W]`` in [0, 1] -> (mean, log-variance), each ``[N, C_z, H/4, W/4]``."""
        H, W = frames.shape[-2:]
        if H % self.factor or W % self.factor:
            raise PreconditionError(f"frame size must be divisible by {self.factor}, got {H}x{W}")
        mean, logvar = self.encoder(frames - 0.5).chunk(2, dim=1)
        if not torch.isfinite(mean).all():
            raise NumericalError("VAE encoder produced a non-finite latent")
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z) + 0.5

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(z).all():
            raise NumericalError("cannot decode a non-finite latent")
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, frames: torch.Tensor, generator: torch.Generator | None = None):
        mean, logvar = self.encode(frames)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        return self.decode_raw(z), mean, logvar


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), averaged over elements."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


@dataclass
class VAEConfig:
    latent_channels: int = 4
    width: int = 32
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-3
    kl_weight: float = 1e-4
    seed: int = 0


def train_vae(frames: np.ndarray, cfg: VAEConfig = VAEConfig(), log_every: int = 0):
    """Fit on a stack of frames ``[N, H, W]``; returns ``(vae, losses)``.

    After training the latent scale factor is set to one over the standard
    deviation of the posterior means over ``frames``.
    """
    x = torch.from_numpy(np.asarray(frames, dtype=np.float32)).unsqueeze(1)
    if x.shape[0] == 0:
        raise PreconditionError("no frames to train the VAE on")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    vae = VAE(cfg.latent_channels, cfg.width, seed=cfg.seed)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(x.shape[0], (min(cfg.batch, x.shape[0]),), generator=gen)
        recon, mean, logvar = vae(x[idx], generator=gen)
        loss = F.mse_loss(recon, x[idx]) + cfg.kl_weight * kl_divergence(mean, logvar)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite VAE loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f", step, losses[-1])
    vae.eval()
    with torch.no_grad():
        means = torch.cat([vae.encode(x[i : i + 256])[0] for i in range(0, x.shape[0], 256)])
        vae.scale_factor.fill_(1.0 / max(means.std().item(), 1e-6))
    return vae, losses


@torch.no_grad()
def vae_encode(vae: VAE, frames: np.ndarray) -> LatentVideo:
    """Posterior means of ``[T, H, W]`` frames, multiplied by the latent scale factor."""
    vae.eval()
    x = torch.from_numpy(np.asarray(frames, dtype=np.float32)).unsqueeze(1)
    mean, _ = vae.encode(x)
    return LatentVideo((mean * vae.scale_factor).numpy(), vae.factor, vae.latent_channels)


@torch.no_grad()
def vae_decode(vae: VAE, latents: LatentVideo | np.ndarray | torch.Tensor) -> np.ndarray:
    """Scaled latents ``[T, C_z, h, w]`` -> frames ``[T, H, W]`` clamped to [0, 1]."""
    vae.eval()
    z = latents.tensor if isinstance(latents, LatentVideo) else latents
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    return vae.decode(z / vae.scale_factor)[:, 0].numpy()


def save_vae(path: str | Path, vae: VAE, cfg: VAEConfig, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "vae", "config_hash": config_hash, "config": asdict(cfg), "params": vae.state_dict()}, path)
    return path


def load_vae(path: str | Path) -> VAE:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = VAEConfig(**blob["config"])
    vae = VAE(cfg.latent_channels, cfg.width, seed=cfg.seed)
    vae.load_state_dict(blob["params"])
    vae.eval()
    return vae


# latent store: MCFS records whose values are a 4-float shape header followed by the latents


def write_latent_store(latents: dict[str, LatentVideo | np.ndarray], path: str | Path) -> Path:
    records = []
    for vid, lat in latents.items():
        arr = np.asarray(lat.tensor if isinstance(lat, LatentVideo) else lat, dtype=np.float32)
        if arr.ndim != 4:
            raise PreconditionError(f"latents for {vid!r} must be [T, C, h, w], got {arr.shape}")
        header = np.asarray(arr.shape, dtype=np.float32)
        records.append(FeatureRecord(vid, np.concatenate([header, arr.ravel()])))
    return write_feature_store(records, path)


def read_latent_store(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    for rec in read_feature_store(path):
        shape = tuple(int(s) for s in rec.values[:4])
        if len(rec.values) < 4 or int(np.prod(shape)) != len(rec.values) - 4:
            raise StoreFormatError(f"latent record {rec.id!r}: header {shape} does not match {len(rec.values) - 4} values")
        out[rec.id] = rec.values[4:].reshape(shape)
    return out
