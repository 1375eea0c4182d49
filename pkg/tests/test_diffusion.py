from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mcdm.data import FeatureRecord, PhantomSpec, generate_phantom, write_feature_store
from mcdm.diffusion import (
    VAE,
    DenoiserConfig,
    LatentVideo,
    LVDMConfig,
    SpatioTemporalUNet,
    VAEConfig,
    denoise_predict,
    diffusion_loss,
    kl_divergence,
    load_lvdm,
    load_vae,
    make_noise_schedule,
    q_sample,
    read_latent_store,
    sample_video,
    save_lvdm,
    save_vae,
    train_lvdm,
    train_vae,
    vae_decode,
    vae_encode,
    write_latent_store,
)
from mcdm.errors import ConfigurationError, PreconditionError, StoreFormatError
from mcdm.metrics import psnr

TINY = DenoiserConfig(base_channels=8, embed_dim=16, heads=2, conditioning_dim=6)


# ---------------------------------------------------------------------------
# schedule and forward process


def test_alpha_bar_first_step():
    s = make_noise_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar.dtype == np.float64


def test_two_step_schedule():
    s = make_noise_schedule(2, 0.1, 0.3)
    assert s.alpha_bar[1:].tolist() == pytest.approx([0.9, 0.9 * 0.7], abs=1e-15)


@given(st.integers(2, 200), st.floats(1e-5, 0.5), st.floats(0.0, 0.49))
def test_alpha_bar_strictly_decreasing(T, b0, extra):
    s = make_noise_schedule(T, b0, min(b0 + extra, 0.999))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.betas[1] <= s.betas[-1] < 1


def test_schedule_preconditions():
    with pytest.raises(PreconditionError):
        make_noise_schedule(1)
    with pytest.raises(PreconditionError):
        make_noise_schedule(10, 0.02, 0.01)
    with pytest.raises(PreconditionError):
        make_noise_schedule(10, 0.0, 0.01)
    with pytest.raises(PreconditionError):
        make_noise_schedule(10, kind="cosine")


def test_q_sample_endpoints():
    s = make_noise_schedule(1000)
    z0, eps = torch.randn(2, 3, 4), torch.randn(2, 3, 4)
    assert torch.equal(q_sample(z0, 0, eps, s), z0)
    assert torch.allclose(q_sample(z0, 1000, eps, s), eps, atol=0.03)  # sqrt(abar_T) ~ 6e-3


def test_q_sample_arithmetic():
    s = make_noise_schedule(2, 0.25, 0.25)  # abar_1 = 0.75
    out = q_sample(torch.zeros(3, 3), 1, torch.ones(3, 3), s)
    assert torch.allclose(out, torch.full((3, 3), 0.5))


def test_q_sample_errors():
    s = make_noise_schedule(10)
    with pytest.raises(PreconditionError):
        q_sample(torch.zeros(2, 2), 1, torch.zeros(3, 3), s)
    with pytest.raises(PreconditionError):
        q_sample(torch.zeros(2, 2), 11, torch.zeros(2, 2), s)


def test_forward_process_variance():
    s = make_noise_schedule(1000)
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(10_000, generator=g, dtype=torch.float64)
    eps = torch.randn(10_000, generator=g, dtype=torch.float64)
    assert abs(float(q_sample(z0, 1000, eps, s).var()) - 1.0) < 0.05


# ---------------------------------------------------------------------------
# VAE


def test_kl_zero_for_standard_normal():
    assert float(kl_divergence(torch.zeros(2, 4, 2, 2), torch.zeros(2, 4, 2, 2))) == 0.0


def test_vae_shape_contract():
    vae = VAE()
    mean, logvar = vae.encode(torch.rand(1, 1, 32, 32))
    assert mean.shape == (1, 4, 8, 8) and logvar.shape == (1, 4, 8, 8)
    lat = vae_encode(vae, np.random.rand(3, 32, 32))
    assert lat.tensor.shape == (3, 4, 8, 8) and lat.frame_shape == (32, 32)
    out = vae_decode(vae, lat)
    assert out.shape == (3, 32, 32) and out.min() >= 0 and out.max() <= 1


def test_vae_rejects_bad_sizes_and_latents():
    with pytest.raises(PreconditionError):
        VAE().encode(torch.rand(1, 1, 30, 30))
    with pytest.raises(Exception):
        LatentVideo(np.full((1, 4, 2, 2), np.nan))
    with pytest.raises(PreconditionError):
        LatentVideo(np.zeros((1, 3, 2, 2)))


def test_vae_overfits_one_frame(tmp_path):
    clip, _ = generate_phantom(PhantomSpec(seed=0, period=16, pulse_amplitude=0.3), 16)
    frame = clip.frames[:1]
    vae, losses = train_vae(frame, VAEConfig(steps=1000, batch=1, lr=2e-3))
    rec = vae_decode(vae, vae_encode(vae, frame))
    assert psnr(rec[0], frame[0]) > 30
    loaded = load_vae(save_vae(tmp_path / "vae.pt", vae, VAEConfig()))
    assert np.array_equal(vae_decode(loaded, vae_encode(loaded, frame)), rec)


def test_latent_store_round_trip(tmp_path, rng):
    lat = {"a": rng.standard_normal((5, 4, 2, 2)).astype(np.float32), "b": LatentVideo(rng.standard_normal((5, 4, 2, 2)))}
    back = read_latent_store(write_latent_store(lat, tmp_path / "z.mcfs"))
    assert np.array_equal(back["a"], lat["a"]) and np.array_equal(back["b"], lat["b"].tensor)
    write_feature_store([FeatureRecord("bad", np.array([2, 4, 2, 2, 1, 2], np.float32))], tmp_path / "bad.mcfs")
    with pytest.raises(StoreFormatError):
        read_latent_store(tmp_path / "bad.mcfs")


# ---------------------------------------------------------------------------
# denoiser


def test_denoiser_config_validation():
    assert DenoiserConfig().residual_blocks == 4
    with pytest.raises(ConfigurationError):
        DenoiserConfig(residual_blocks=1)
    with pytest.raises(ConfigurationError):
        DenoiserConfig(conditioning="cross_attention")


def test_denoiser_shape_and_cond_checks():
    model = SpatioTemporalUNet(TINY)
    z = torch.randn(5, 4, 4, 6)
    assert denoise_predict(model, z, 3, np.zeros(6)).shape == z.shape
    with pytest.raises(PreconditionError):
        denoise_predict(model, z, 3, np.zeros(7))
    a = denoise_predict(model, z, 3, None)
    b = denoise_predict(model, z, 3, None)
    assert torch.equal(a, b)


def test_conditioning_path_is_live_after_training():
    g = np.random.default_rng(0)
    latents = {f"v{i}": g.standard_normal((8, 4, 4, 4)).astype(np.float32) for i in range(4)}
    motions = {f"v{i}": g.standard_normal(6).astype(np.float32) for i in range(4)}
    model, _ = train_lvdm(latents, motions, LVDMConfig(denoiser=TINY, steps=2, batch=2, clip_frames=4, lr=1e-3))
    z = torch.randn(4, 4, 4, 4)
    a = denoise_predict(model, z, 10, motions["v0"])
    b = denoise_predict(model, z, 10, motions["v1"])
    assert not torch.equal(a, b)


def test_temporal_layers_are_length_agnostic():
    model = SpatioTemporalUNet(TINY)
    for T in (1, 8, 16):
        assert model(torch.randn(2, T, 4, 4, 4), torch.tensor([1, 5]), torch.zeros(2, 6)).shape == (2, T, 4, 4, 4)


def test_diffusion_loss_gradient():
    torch.manual_seed(0)
    model = SpatioTemporalUNet(TINY).double()
    with torch.no_grad():
        model.out.weight.normal_(0, 0.1)  # the zero-initialised output would hide the input dependence
    s = make_noise_schedule(64)
    g = np.random.default_rng(0)
    z0 = g.standard_normal((1, 2, 4, 8, 8))
    noise = torch.from_numpy(g.standard_normal((1, 2, 4, 8, 8)))
    t = torch.tensor([20])
    cond = torch.from_numpy(g.standard_normal((1, 6)))

    def f(x):
        with torch.no_grad():
            return float(diffusion_loss(model, torch.from_numpy(x), t, noise, s, cond))

    z = torch.from_numpy(z0.copy()).requires_grad_()
    diffusion_loss(model, z, t, noise, s, cond).backward()
    assert oracles.rel_error(z.grad.numpy(), oracles.numeric_grad(f, z0)) < 1e-3


# ---------------------------------------------------------------------------
# training and sampling


def _toy_stores(n=8, T=8):
    latents, motions = {}, {}
    for i in range(n):
        amp = 0.15 if i % 2 == 0 else 0.4
        clip, _ = generate_phantom(PhantomSpec(seed=i, pulse_amplitude=amp, period=8, size=16, base_radius=4.0), T)
        x = torch.from_numpy(clip.frames).unsqueeze(1)
        latents[f"v{i}"] = torch.nn.functional.avg_pool2d(x, 4).repeat(1, 4, 1, 1).numpy() * 4 - 2
        motions[f"v{i}"] = np.full(6, amp, dtype=np.float32)
    return latents, motions


def test_train_lvdm_reduces_loss():
    latents, motions = _toy_stores()
    cfg = LVDMConfig(denoiser=TINY, steps=200, batch=4, clip_frames=8, lr=2e-3)
    _, hist = train_lvdm(latents, motions, cfg)
    assert np.mean(hist[-50:]) < 0.8 * np.mean(hist[:50])


def test_train_lvdm_is_deterministic():
    latents, motions = _toy_stores(4)
    cfg = LVDMConfig(denoiser=TINY, steps=20, batch=2, clip_frames=4)
    _, h1 = train_lvdm(latents, motions, cfg)
    _, h2 = train_lvdm(latents, motions, cfg)
    assert h1 == h2


def test_train_lvdm_store_errors():
    latents, motions = _toy_stores(2)
    with pytest.raises(PreconditionError, match="empty"):
        train_lvdm(latents, {}, LVDMConfig(denoiser=TINY, steps=1))
    with pytest.raises(PreconditionError, match="v1"):
        train_lvdm(latents, {"v0": motions["v0"]}, LVDMConfig(denoiser=TINY, steps=1))
    with pytest.raises(PreconditionError):
        train_lvdm(latents, {k: np.zeros(5) for k in motions}, LVDMConfig(denoiser=TINY, steps=1))


def test_sample_video_contract(tmp_path):
    latents, motions = _toy_stores(2)
    cfg = LVDMConfig(denoiser=TINY, steps=2, batch=2, clip_frames=4, num_steps=8)
    model, hist = train_lvdm(latents, motions, cfg)
    vae = VAE(seed=0)
    sched = cfg.schedule()
    for sampler in ("ancestral", "deterministic"):
        a = sample_video(model, vae, sched, motions["v0"], 16, (32, 32), sampler, seed=3)
        b = sample_video(model, vae, sched, motions["v0"], 16, (32, 32), sampler, seed=3)
        assert a.frames.shape == (16, 32, 32)
        assert np.array_equal(a.frames, b.frames)
        assert a.frames.min() >= 0 and a.frames.max() <= 1
    with pytest.raises(PreconditionError):
        sample_video(model, vae, sched, motions["v0"], 0, (32, 32))
    loaded, cfg2 = load_lvdm(save_lvdm(tmp_path / "m.pt", model, cfg, hist))
    assert cfg2 == cfg
    c = sample_video(loaded, vae, sched, motions["v0"], 4, (32, 32), seed=1)
    d = sample_video(model, vae, sched, motions["v0"], 4, (32, 32), seed=1)
    assert np.array_equal(c.frames, d.frames)


def test_scaled_schedules_end_near_pure_noise():
    for T in (8, 16, 64, 1000):
        assert LVDMConfig(num_steps=T).schedule().alpha_bar[-1] < 1e-4
    assert LVDMConfig(num_steps=1000).schedule().alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert LVDMConfig(num_steps=64, scale_betas=False).schedule().alpha_bar[-1] > 0.5


class _GaussianOracle(torch.nn.Module):
    """Exact noise predictor E[eps | z_t] for data z0 ~ N(mu, s^2)."""

    def __init__(self, schedule, mu, s):
        super().__init__()
        self.cfg = DenoiserConfig(latent_channels=4)
        self.ab, self.mu, self.s = schedule.alpha_bar, mu, s

    def forward(self, z, t, cond=None):
        ab = float(self.ab[int(t[0])])
        return np.sqrt(1 - ab) * (z - np.sqrt(ab) * self.mu) / (ab * self.s**2 + 1 - ab)


def _predicted_moments(sched, mu, s, sampler):
    """Propagate mean and variance through the reverse chain, which is affine in z for Gaussian data."""
    ab, betas, post = sched.alpha_bar, sched.betas, sched.posterior_variance()
    m, v = 0.0, 1.0
    for t in range(sched.num_steps, 0, -1):
        k = np.sqrt(1 - ab[t]) / (ab[t] * s**2 + 1 - ab[t])  # eps = k (z - sqrt(ab) mu)
        if sampler == "ancestral":
            a = (1 - betas[t] * k / np.sqrt(1 - ab[t])) / np.sqrt(1 - betas[t])
            b = betas[t] * k * np.sqrt(ab[t]) * mu / (np.sqrt(1 - ab[t]) * np.sqrt(1 - betas[t]))
            noise = post[t] if t > 1 else 0.0
        else:
            a = np.sqrt(ab[t - 1]) * (1 - np.sqrt(1 - ab[t]) * k) / np.sqrt(ab[t]) + np.sqrt(1 - ab[t - 1]) * k
            b = np.sqrt(ab[t - 1]) * np.sqrt(1 - ab[t]) * k * mu - np.sqrt(1 - ab[t - 1]) * k * np.sqrt(ab[t]) * mu
            noise = 0.0
        m, v = a * m + b, a * a * v + noise
    return m, np.sqrt(v)


@pytest.mark.parametrize("T", [64, 1000])
@pytest.mark.parametrize("sampler", ["ancestral", "deterministic"])
def test_samplers_match_closed_form_on_gaussian_data(T, sampler):
    from mcdm.diffusion import sample_latents

    sched = LVDMConfig(num_steps=T).schedule()
    z = sample_latents(_GaussianOracle(sched, 0.7, 0.3), sched, None, 8, (32, 32), sampler, seed=0)
    m, sd = _predicted_moments(sched, 0.7, 0.3, sampler)
    assert abs(float(z.mean()) - m) < 0.01
    assert abs(float(z.std()) / sd - 1) < 0.03
    if T == 1000:  # fine chains reproduce the data distribution itself
        assert abs(m - 0.7) < 0.01 and abs(sd / 0.3 - 1) < 0.05
