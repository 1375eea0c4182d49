"""Training and sampling for the motion-conditioned latent video diffusion model."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from ..data import VideoClip
from ..errors import NumericalError, PreconditionError
from .denoiser import DenoiserConfig, SpatioTemporalUNet
from .schedule import NoiseSchedule, make_noise_schedule, q_sample
from .vae import VAE, vae_decode

log = logging.getLogger(__name__)


@dataclass
class LVDMConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    num_steps: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.02
    scale_betas: bool = True  # beta bounds are quoted for a 1000-step chain
    lr: float = 1e-4
    batch: int = 4
    clip_frames: int = 8
    steps: int = 1000
    p_drop: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "LVDMConfig":
        d = dict(d)
        d["denoiser"] = DenoiserConfig(**d.get("denoiser", {}))
        return cls(**d)

    def schedule(self) -> NoiseSchedule:
        # shorter chains take proportionally larger steps so the last alpha_bar still ends near 0
        s = 1000 / self.num_steps if self.scale_betas else 1.0
        return make_noise_schedule(self.num_steps, min(self.beta_start * s, 0.999), min(self.beta_end * s, 0.999))


def diffusion_loss(model: SpatioTemporalUNet, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                   schedule: NoiseSchedule, cond: torch.Tensor | None = None, drop: torch.Tensor | None = None) -> torch.Tensor:
    """``mean |noise - eps_hat(q_sample(z0, t, noise), t, cond)|^2``."""
    z_t = q_sample(z0, t, noise, schedule)
    return F.mse_loss(model(z_t, t, cond, drop), noise)


def check_stores(latents: Mapping[str, np.ndarray], motions: Mapping[str, np.ndarray]) -> None:
    if not motions:
        raise PreconditionError("motion store is empty")
    if not latents:
        raise PreconditionError("latent store is empty")
    missing = sorted(set(latents) - set(motions))
    if missing:
        raise PreconditionError(f"no motion vector for {len(missing)} latent clip(s): {', '.join(missing)}")


def train_lvdm(latents: Mapping[str, np.ndarray], motions: Mapping[str, np.ndarray], cfg: LVDMConfig = LVDMConfig(), log_every: int = 0):
    """Seeded noise-prediction training on random ``clip_frames`` windows.

    ``latents`` maps video id -> ``[T, C_z, h, w]``; ``motions`` maps video id
    -> motion vector. Returns ``(model, history)`` with one loss per step.
    """
    check_stores(latents, motions)
    ids = sorted(latents)
    clips = [torch.as_tensor(np.asarray(latents[i], dtype=np.float32)) for i in ids]
    short = [i for i, c in zip(ids, clips) if c.shape[0] < cfg.clip_frames]
    if short:
        raise PreconditionError(f"clips shorter than clip_frames={cfg.clip_frames}: {', '.join(short)}")
    conds = torch.as_tensor(np.stack([np.asarray(motions[i], dtype=np.float32) for i in ids]))
    dcfg = cfg.denoiser
    if conds.shape[1] != dcfg.conditioning_dim:
        raise PreconditionError(f"motion vectors have dim {conds.shape[1]}, denoiser expects {dcfg.conditioning_dim}")
    schedule = cfg.schedule()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = SpatioTemporalUNet(dcfg)
    model.set_condition_stats(conds.numpy())
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        pick = torch.randint(len(ids), (cfg.batch,), generator=gen).tolist()
        windows = []
        for k in pick:
            start = int(torch.randint(clips[k].shape[0] - cfg.clip_frames + 1, (1,), generator=gen))
            windows.append(clips[k][start : start + cfg.clip_frames])
        z0 = torch.stack(windows)
        t = torch.randint(1, schedule.num_steps + 1, (cfg.batch,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        drop = torch.rand(cfg.batch, generator=gen) < cfg.p_drop
        loss = diffusion_loss(model, z0, t, noise, schedule, conds[pick], drop)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite diffusion loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("lvdm step %d loss %.4f", step, history[-1])
    model.eval()
    return model, history


@torch.no_grad()
def sample_latents(model: SpatioTemporalUNet, schedule: NoiseSchedule, cond, frames: int, latent_hw: tuple[int, int],
                   sampler: str = "ancestral", seed: int = 0) -> torch.Tensor:
    """Run the reverse process from seeded Gaussian latents; returns ``[T, C_z, h, w]``.

    ``ancestral`` is the DDPM chain with posterior variance; ``deterministic``
    is the eta = 0 DDIM update over the same steps.
    """
    if frames < 1:
        raise PreconditionError(f"frames must be >= 1, got {frames}")
    if sampler not in ("ancestral", "deterministic"):
        raise PreconditionError(f"unknown sampler {sampler!r}")
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    c = None if cond is None else torch.as_tensor(np.asarray(cond, dtype=np.float32)).reshape(1, -1)
    h, w = latent_hw
    z = torch.randn((1, frames, model.cfg.latent_channels, h, w), generator=gen)
    ab = schedule.alpha_bar
    betas = schedule.betas
    var = schedule.posterior_variance()
    for t in range(schedule.num_steps, 0, -1):
        eps = model(z, torch.tensor([t]), c).double()
        zd = z.double()
        if sampler == "ancestral":
            mean = (zd - betas[t] / np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(1.0 - betas[t])
            if t > 1:
                mean = mean + np.sqrt(var[t]) * torch.randn(z.shape, generator=gen, dtype=torch.float64)
            z = mean.float()
        else:
            x0 = (zd - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
            z = (np.sqrt(ab[t - 1]) * x0 + np.sqrt(1.0 - ab[t - 1]) * eps).float()
    if not torch.isfinite(z).all():
        raise NumericalError("reverse process produced non-finite latents")
    return z[0]


def sample_video(model: SpatioTemporalUNet, vae: VAE, schedule: NoiseSchedule, cond, frames: int,
                 frame_hw: tuple[int, int], sampler: str = "ancestral", seed: int = 0, video_id: str = "sample") -> VideoClip:
    H, W = frame_hw
    if H % vae.factor or W % vae.factor:
        raise PreconditionError(f"frame size must be divisible by {vae.factor}, got {H}x{W}")
    z = sample_latents(model, schedule, cond, frames, (H // vae.factor, W // vae.factor), sampler, seed)
    return VideoClip(video_id, vae_decode(vae, z))


def save_lvdm(path: str | Path, model: SpatioTemporalUNet, cfg: LVDMConfig, history=(), config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"kind": "lvdm", "config_hash": config_hash, "config": asdict(cfg), "step": len(history),
            "params": model.state_dict()}
    torch.save(blob, path)
    return path


def load_lvdm(path: str | Path) -> tuple[SpatioTemporalUNet, LVDMConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = LVDMConfig.from_dict(blob["config"])
    model = SpatioTemporalUNet(cfg.denoiser)
    model.load_state_dict(blob["params"])
    model.eval()
    return model, cfg
