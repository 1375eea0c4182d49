"""Motion-conditioned latent video diffusion for echocardiography-style clips."""

__version__ = "0.1.0"
