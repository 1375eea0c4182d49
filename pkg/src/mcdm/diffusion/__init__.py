from .denoiser import DenoiserConfig, SpatioTemporalUNet, denoise_predict
from .schedule import NoiseSchedule, make_noise_schedule, q_sample
from .train import LVDMConfig, diffusion_loss, load_lvdm, sample_latents, sample_video, save_lvdm, train_lvdm
from .vae import (
    VAE, LatentVideo, VAEConfig, kl_divergence, load_vae, read_latent_store, save_vae, train_vae, vae_decode, vae_encode,
    write_latent_store,
)

__all__ = [
    "DenoiserConfig", "SpatioTemporalUNet", "denoise_predict",
    "NoiseSchedule", "make_noise_schedule", "q_sample",
    "LVDMConfig", "diffusion_loss", "load_lvdm", "sample_latents", "sample_video", "save_lvdm", "train_lvdm",
    "VAE", "LatentVideo", "VAEConfig", "kl_divergence", "load_vae", "read_latent_store", "save_vae", "train_vae", "vae_decode", "vae_encode",
    "write_latent_store",
]
