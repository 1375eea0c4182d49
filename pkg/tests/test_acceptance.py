"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line through the ``acceptance`` fixture; the
lines are printed in the terminal summary. Training-based criteria are marked
``slow`` (deselect with ``-m "not slow"``).
"""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

import oracles
from mcdm.config import load_config
from mcdm.data import (
    FeatureRecord,
    FlowField,
    PhantomSpec,
    feature_store_dict,
    generate_phantom,
    phantom_flow,
    read_feature_store,
    read_flow_store,
    select_frame_pair,
    sliding_pairs,
    write_feature_store,
    write_flow_store,
)
from mcdm.diffusion import (
    VAE,
    DenoiserConfig,
    LVDMConfig,
    SpatioTemporalUNet,
    VAEConfig,
    diffusion_loss,
    make_noise_schedule,
    read_latent_store,
    sample_video,
    train_lvdm,
    train_vae,
    vae_encode,
    write_latent_store,
)
from mcdm.errors import StoreFormatError
from mcdm.mafe import MAFE
from mcdm.mafe.pyramid import laplacian_loss, laplacian_pyramid, reconstruct
from mcdm.mafe.train import MAFEConfig, build_pair_set, evaluate_mafe, motion_vectors, train_mafe
from mcdm.metrics import GaussianStats, RandomVideoEmbedder, endpoint_error, frechet_distance, fvd, ssim
from mcdm.pipeline import Pipeline, run_ablation
from mcdm.pseudo import ReidConfig, block_match_flow, embed_clips, flow_loss, reid_loss, train_reid


@contextmanager
def criterion(acceptance, number: int, title: str):
    """Record PASS when the block finishes, FAIL (with the reason) when it raises."""
    detail: dict = {}
    start = time.time()
    try:
        yield detail
    except BaseException as e:
        reason = str(e).splitlines()[0] if str(e) else type(e).__name__
        acceptance.record(number, False, f"{title}: {reason[:160]}")
        raise
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    acceptance.record(number, True, f"{title} ({extra}{', ' if extra else ''}{time.time() - start:.0f}s)")


# ---------------------------------------------------------------------------
# 1-4, 11: oracle checks


def test_c01_pyramid_and_loss_oracles(acceptance):
    with criterion(acceptance, 1, "pyramid/loss/ssim oracles on 50 random 16x16 cases") as d:
        g = np.random.default_rng(1)
        worst = {"recon": 0.0, "lap": 0.0, "ssim": 0.0}
        for _ in range(50):
            a, b = g.random((16, 16)), g.random((16, 16))
            ta, tb = torch.from_numpy(a)[None, None], torch.from_numpy(b)[None, None]
            worst["recon"] = max(worst["recon"], float((reconstruct(laplacian_pyramid(ta, 3)) - ta).abs().max()))
            ref = oracles.laplacian_loss(a, b, 3)
            worst["lap"] = max(worst["lap"], abs(float(laplacian_loss(ta, tb, 3)) - ref) / ref)
            ref = oracles.ssim(a, b)
            worst["ssim"] = max(worst["ssim"], abs(ssim(a, b) - ref) / max(abs(ref), 1e-12))
        d.update({k: f"{v:.1e}" for k, v in worst.items()})
        assert worst["recon"] < 1e-6, worst
        assert worst["lap"] < 1e-8, worst
        assert worst["ssim"] < 1e-8, worst


def _grad_error(fn, x: np.ndarray) -> float:
    t = torch.from_numpy(x.copy()).requires_grad_()
    fn(t).backward()
    with torch.no_grad():
        num = oracles.numeric_grad(lambda v: float(fn(torch.from_numpy(v))), x)
    return oracles.rel_error(t.grad.numpy(), num)


def test_c02_gradient_checks(acceptance):
    with criterion(acceptance, 2, "analytic vs finite-difference gradients on 8x8 inputs") as d:
        g = np.random.default_rng(2)
        b = torch.from_numpy(g.random((1, 1, 8, 8)))
        ft1, pseudo = torch.from_numpy(g.standard_normal((1, 2, 8, 8))), torch.from_numpy(g.standard_normal((1, 2, 8, 8)))
        target = torch.nn.functional.normalize(torch.from_numpy(g.standard_normal((1, 2, 4))), dim=-1)

        torch.manual_seed(0)
        model = SpatioTemporalUNet(DenoiserConfig(base_channels=8, embed_dim=16, heads=2, conditioning_dim=6)).double()
        with torch.no_grad():
            model.out.weight.normal_(0, 0.1)  # a zero output layer would make the input gradient vanish
        sched = make_noise_schedule(64)
        noise = torch.from_numpy(g.standard_normal((1, 2, 4, 8, 8)))
        cond = torch.from_numpy(g.standard_normal((1, 6)))

        errs = {
            "laplacian_loss": _grad_error(lambda x: laplacian_loss(x, b, 2), g.random((1, 1, 8, 8))),
            "flow_loss": _grad_error(lambda x: flow_loss(x, ft1, pseudo), g.standard_normal((1, 2, 8, 8))),
            "reid_loss": _grad_error(lambda x: reid_loss(x, target), g.standard_normal((1, 2, 4, 8, 8))),
            "diffusion_mse": _grad_error(lambda x: diffusion_loss(model, x, torch.tensor([20]), noise, sched, cond),
                                         g.standard_normal((1, 2, 4, 8, 8))),
        }
        d.update({k: f"{v:.1e}" for k, v in errs.items()})
        assert max(errs.values()) < 1e-3, errs


def test_c03_frechet_oracle(acceptance):
    with criterion(acceptance, 3, "Frechet closed forms and identical-sample FVD") as d:
        s = lambda mu, var: GaussianStats(np.atleast_1d(mu), np.atleast_2d(var), 10)  # noqa: E731
        errs = [
            abs(frechet_distance(s(0.0, 1.0), s(0.0, 1.0)) - 0.0),
            abs(frechet_distance(s(0.0, 1.0), s(1.0, 1.0)) - 1.0),
            abs(frechet_distance(s(0.0, 1.0), s(0.0, 4.0)) - 1.0),
        ]
        g = np.random.default_rng(3)
        for _ in range(20):
            mp, mq = g.standard_normal(4), g.standard_normal(4)
            vp, vq = g.uniform(0.1, 3, 4), g.uniform(0.1, 3, 4)
            ref = ((mp - mq) ** 2).sum() + ((np.sqrt(vp) - np.sqrt(vq)) ** 2).sum()
            errs.append(abs(frechet_distance(s(mp, np.diag(vp)), s(mq, np.diag(vq))) - ref))
        clips = [generate_phantom(PhantomSpec(seed=i, period=16), 16)[0].frames for i in range(6)]
        same = fvd(clips, clips, RandomVideoEmbedder(0), clip_len=16)
        d.update(closed_form_err=f"{max(errs):.1e}", fvd_same=f"{same:.1e}")
        assert max(errs) < 1e-8
        assert same < 1e-6


def test_c04_flow_oracle(acceptance):
    with criterion(acceptance, 4, "block matching vs exhaustive SAD on 32x32; integer-shift EPE") as d:
        g = np.random.default_rng(4)
        I0 = g.random((32, 32))
        I1 = np.roll(I0, (1, -2), axis=(0, 1)) + 0.05 * g.random((32, 32))
        f = block_match_flow(I0, I1, patch=5, search=3)
        u, v = oracles.block_match(I0, I1, 5, 3)
        assert np.array_equal(f.u, u) and np.array_equal(f.v, v)

        patch, search = 7, 4
        margin = search + patch // 2  # pixels whose shifted patch stays inside the frame
        mask = np.zeros((32, 32), bool)
        mask[margin:-margin, margin:-margin] = True
        worst = 0.0
        for seed in range(3):
            img = generate_phantom(PhantomSpec(seed=seed), 16)[0].frames[3]
            for du in range(-search, search + 1):
                for dv in range(-search, search + 1):
                    flow = block_match_flow(img, np.roll(img, (dv, du), axis=(0, 1)), patch, search)
                    ref = FlowField(np.full((32, 32), float(du)), np.full((32, 32), float(dv)))
                    worst = max(worst, endpoint_error(flow, ref, mask))
        d.update(max_epe=worst)
        assert worst == 0.0


def test_c11_store_round_trips(acceptance, tmp_path):
    with criterion(acceptance, 11, "MCFS/MCFL round trips and error paths"):
        g = np.random.default_rng(11)
        recs = [FeatureRecord(f"id{i}", g.standard_normal(7).astype(np.float32)) for i in range(5)]
        back = read_feature_store(write_feature_store(recs, tmp_path / "a.mcfs"))
        assert [r.id for r in back] == [r.id for r in recs]
        assert all(np.array_equal(x.values, y.values) for x, y in zip(back, recs))
        assert read_feature_store(write_feature_store([], tmp_path / "empty.mcfs")) == []

        flows = [FlowField(g.standard_normal((6, 5)).astype(np.float32), g.standard_normal((6, 5)).astype(np.float32))
                 for _ in range(3)]
        fback = read_flow_store(write_flow_store(flows, tmp_path / "a.mcfl"))
        assert all(np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v) for a, b in zip(fback, flows))

        lat = {"v0": g.standard_normal((4, 4, 2, 2)).astype(np.float32)}
        assert np.array_equal(read_latent_store(write_latent_store(lat, tmp_path / "z.mcfs"))["v0"], lat["v0"])

        raw = (tmp_path / "a.mcfs").read_bytes()
        for name, blob in (("magic", b"XXXX" + raw[4:]), ("truncated", raw[:-3]), ("trailing", raw + b"\0")):
            (tmp_path / f"{name}.mcfs").write_bytes(blob)
            with pytest.raises(StoreFormatError):
                read_feature_store(tmp_path / f"{name}.mcfs")
        raw = (tmp_path / "a.mcfl").read_bytes()
        for name, blob in (("magic", b"XXXX" + raw[4:]), ("truncated", raw[:-3]), ("trailing", raw + b"\0")):
            (tmp_path / f"{name}.mcfl").write_bytes(blob)
            with pytest.raises(StoreFormatError):
                read_flow_store(tmp_path / f"{name}.mcfl")
        with pytest.raises(StoreFormatError):
            write_flow_store([flows[0], FlowField.zeros(3, 3)], tmp_path / "mixed.mcfl")
        with pytest.raises(StoreFormatError):
            write_feature_store([recs[0], FeatureRecord("x", np.zeros(2, np.float32))], tmp_path / "mixed.mcfs")


# ---------------------------------------------------------------------------
# 5-6: MAFE on the acceptance phantom regime


def _regime_clips(n: int, offset: int, rng):
    out = []
    for i in range(n):
        spec = PhantomSpec(base_radius=float(rng.uniform(6, 9)), pulse_amplitude=float(rng.uniform(0.25, 0.4)),
                           period=int(rng.integers(24, 41)), seed=offset + i)
        out.append((spec, generate_phantom(spec, 40, f"v{offset + i}")[0]))
    return out


@pytest.fixture(scope="session")
def mafe_regime():
    """64 train / 16 held-out phantom clips, ReID embeddings and block-matching pseudo flows."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(123)
    train, test = _regime_clips(64, 0, rng), _regime_clips(16, 1000, rng)
    reid, _ = train_reid([c for _, c in train], ReidConfig(steps=200))
    emb = {r.id: r.values for r in embed_clips(reid, [c for _, c in train + test])}

    def pairs(ds):
        ps, flows, analytic = [], {}, []
        for spec, clip in ds:
            for p in sliding_pairs(clip, 8):
                ps.append(p)
                flows[p.key] = block_match_flow(p.I0, p.I1, 7, 4, 2)
                analytic.append(phantom_flow(spec, p.i0_index, p.i1_index))
        return build_pair_set(ps, emb, flows), analytic

    (train_set, _), (test_set, test_flows) = pairs(train), pairs(test)
    return train_set, test_set, test_flows


@pytest.mark.slow
def test_c05_mafe_trainability(acceptance, mafe_regime):
    train_set, test_set, _ = mafe_regime
    with criterion(acceptance, 5, "MAFE 2000 steps: loss < 25% of initial, PSNR >= blend + 1 dB") as d:
        cfg = MAFEConfig(steps=2000, warmup=100, lambda_reid=1.0, lambda_flow=0.01, seed=0)
        model, _, hist = train_mafe(train_set, cfg)
        ratio = np.mean([h["total"] for h in hist[-50:]]) / hist[0]["total"]
        res = evaluate_mafe(model, test_set)
        d.update(loss_ratio=f"{ratio:.3f}", psnr=f"{res['psnr']:.2f}", blend=f"{res['psnr_blend']:.2f}")
        assert ratio < 0.25
        assert res["psnr"] - res["psnr_blend"] >= 1.0


@pytest.mark.slow
def test_c06_pseudo_flow_lowers_epe(acceptance, mafe_regime):
    train_set, test_set, test_flows = mafe_regime
    with criterion(acceptance, 6, "median held-out EPE over 3 seeds: lambda2=0.01 < lambda2=0") as d:
        epe = {0.0: [], 0.01: []}
        for seed in range(3):
            for lam in epe:
                model, _, _ = train_mafe(train_set, MAFEConfig(steps=1000, warmup=100, lambda_flow=lam, seed=seed))
                epe[lam].append(evaluate_mafe(model, test_set, test_flows)["epe"])
        med = {lam: float(np.median(v)) for lam, v in epe.items()}
        d.update(epe_l0=f"{med[0.0]:.3f}", epe_l001=f"{med[0.01]:.3f}",
                 per_seed=";".join(f"{a:.3f}/{b:.3f}" for a, b in zip(epe[0.0], epe[0.01])))
        assert med[0.01] < med[0.0]


# ---------------------------------------------------------------------------
# 8: motion conditioning of the latent diffusion model


@pytest.mark.slow
def test_c08_conditioning_effect(acceptance):
    torch.set_num_threads(1)
    with criterion(acceptance, 8, "high-amplitude conditioning gives larger inter-frame difference in >= 7/8 seed pairs") as d:
        # two motion classes that differ only in pulse amplitude; even index is low, odd is high
        clips = [generate_phantom(PhantomSpec(base_radius=17.0, pulse_amplitude=0.4 if i % 2 else 0.1, period=8,
                                              size=64, seed=i), 8, f"v{i}")[0] for i in range(48)]
        train, held = clips[:32], clips[32:]
        vectors = motion_vectors(MAFE(seed=0), [select_frame_pair(c, window=4) for c in clips])
        motion = {c.id: v for c, v in zip(clips, vectors)}
        vae, _ = train_vae(np.concatenate([c.frames for c in train]), VAEConfig(steps=400, batch=16, lr=2e-3))
        latents = {c.id: vae_encode(vae, c.frames).tensor for c in train}
        cfg = LVDMConfig(denoiser=DenoiserConfig(base_channels=32, embed_dim=64), num_steps=64, steps=2500,
                         batch=8, clip_frames=8, lr=2e-3)
        model, _ = train_lvdm(latents, {k: motion[k] for k in latents}, cfg)

        def mad(frames):
            return float(np.abs(np.diff(frames, axis=0)).mean())

        hi, lo = [], []
        for s in range(8):
            hi.append(mad(sample_video(model, vae, cfg.schedule(), motion[held[2 * s + 1].id], 8, (64, 64), seed=s).frames))
            lo.append(mad(sample_video(model, vae, cfg.schedule(), motion[held[2 * s].id], 8, (64, 64), seed=s).frames))
        wins = sum(a > b for a, b in zip(hi, lo))
        d.update(wins=f"{wins}/8", mad_hi=f"{np.mean(hi):.4f}", mad_lo=f"{np.mean(lo):.4f}")
        assert wins >= 7


# ---------------------------------------------------------------------------
# 7, 10: pipeline stages at micro scale


@pytest.fixture(scope="session")
def micro_pipeline(tmp_path_factory):
    pipe = Pipeline(load_config("micro"), tmp_path_factory.mktemp("micro"))
    pipe.run_stages(["phantom-gen", "train-reid", "gen-flow"])
    return pipe


@pytest.mark.slow
def test_c07_reid_separation(acceptance, micro_pipeline):
    with criterion(acceptance, 7, "held-out same-video cosine > cross-video cosine on >= 90% of pairs") as d:
        pipe = micro_pipeline
        labels = pipe.class_labels()
        assert len(set(labels.values())) == 2
        emb = feature_store_dict(pipe.stage_dir("train-reid") / "embeddings.mcfs")
        held_out = [c.id for c in pipe.clips("test")]
        by_video = {v: [e / np.linalg.norm(e) for k, e in emb.items() if k.split("#")[0] == v] for v in held_out}
        g = np.random.default_rng(7)
        wins = total = 0
        for anchor_vid in held_out:
            others = [v for v in held_out if v != anchor_vid]
            frames = by_video[anchor_vid]
            for _ in range(250):
                i, j = g.choice(len(frames), 2, replace=False)
                other = by_video[others[g.integers(len(others))]]
                neg = other[g.integers(len(other))]
                wins += float(frames[i] @ frames[j]) > float(frames[i] @ neg)
                total += 1
        d.update(rate=f"{wins / total:.3f}", triplets=total)
        assert wins / total >= 0.9


@pytest.mark.slow
def test_c10_ablation_grid(acceptance, micro_pipeline):
    with criterion(acceptance, 10, "micro ablation: 4x5 grid, all cells finite") as d:
        result, out = run_ablation(micro_pipeline)
        assert result.lambda_reid == [0.0, 1.0, 5.0, 10.0]
        assert result.lambda_flow == [0.0, 0.005, 0.01, 0.05, 0.1]
        assert result.psnr.shape == (4, 5)
        d.update(psnr_range=f"{np.nanmin(result.psnr):.2f}..{np.nanmax(result.psnr):.2f}")
        assert np.isfinite(result.psnr).all(), result.status
        assert (out / "table.md").exists()


# ---------------------------------------------------------------------------
# 9: determinism


@pytest.mark.slow
def test_c09_determinism(acceptance, mafe_regime):
    train_set, _, _ = mafe_regime
    with criterion(acceptance, 9, "bitwise-identical losses (20 steps) and samples"):
        cfg = MAFEConfig(steps=20, warmup=5, seed=3)
        h1, h2 = train_mafe(train_set, cfg)[2], train_mafe(train_set, cfg)[2]
        assert h1 == h2

        g = np.random.default_rng(9)
        latents = {f"v{i}": g.standard_normal((8, 4, 4, 4)).astype(np.float32) for i in range(4)}
        motions = {f"v{i}": g.standard_normal(6).astype(np.float32) for i in range(4)}
        lcfg = LVDMConfig(denoiser=DenoiserConfig(base_channels=8, embed_dim=16, heads=2, conditioning_dim=6),
                          steps=20, batch=2, clip_frames=4, num_steps=16)
        (m1, l1), (m2, l2) = train_lvdm(latents, motions, lcfg), train_lvdm(latents, motions, lcfg)
        assert l1 == l2
        vae = VAE(seed=0)
        a = sample_video(m1, vae, lcfg.schedule(), motions["v0"], 8, (16, 16), seed=5)
        b = sample_video(m2, vae, lcfg.schedule(), motions["v0"], 8, (16, 16), seed=5)
        assert np.array_equal(a.frames, b.frames)
