"""Stage orchestration: dataset, pseudo labels, MAFE, motion vectors, VAE, LVDM, sampling, evaluation.

Each stage writes into ``<root>/<stage>/<hash>/`` where the hash covers only
the config sections the stage depends on, and drops a ``DONE`` marker on
success. Re-running a stage with an unchanged config is a no-op.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, stable_hash
from .data import (
    FlowField,
    PhantomSpec,
    VideoClip,
    feature_store_dict,
    generate_phantom,
    load_video_dataset,
    phantom_flow,
    read_flow_store,
    read_manifest,
    save_video,
    select_frame_pair,
    sliding_pairs,
    write_feature_store,
    write_flow_store,
    write_manifest,
    FeatureRecord,
)
from .diffusion import (
    read_latent_store,
    sample_video,
    save_lvdm,
    load_lvdm,
    train_lvdm,
    train_vae,
    vae_encode,
    write_latent_store,
)
from .diffusion.vae import load_vae, save_vae
from .errors import ConfigurationError, MissingArtifactError, NumericalError, PreconditionError
from .mafe.train import (
    build_pair_set,
    evaluate_mafe,
    load_checkpoint,
    motion_vectors,
    save_checkpoint,
    train_mafe,
)
from .metrics import (
    MetricReport,
    RandomFrameEmbedder,
    RandomVideoEmbedder,
    clip_windows,
    fid,
    fvd,
    inception_score,
    train_motion_classifier,
)
from .pseudo import ReidConfig, block_match_flow, embed_clips, train_reid

log = logging.getLogger(__name__)

STAGES = [
    "phantom-gen",
    "train-reid",
    "gen-flow",
    "train-mafe",
    "extract-motion",
    "train-vae",
    "train-lvdm",
    "sample",
    "evaluate",
]

PREREQUISITES = {
    "phantom-gen": [],
    "train-reid": ["phantom-gen"],
    "gen-flow": ["phantom-gen"],
    "train-mafe": ["train-reid", "gen-flow"],
    "extract-motion": ["train-mafe"],
    "train-vae": ["phantom-gen"],
    "train-lvdm": ["extract-motion", "train-vae"],
    "sample": ["train-lvdm"],
    "evaluate": ["sample"],
}

SECTIONS = {
    "phantom-gen": ("data",),
    "train-reid": ("data", "pseudo"),
    "gen-flow": ("data", "pseudo"),
    "train-mafe": ("data", "pseudo", "mafe"),
    "extract-motion": ("data", "pseudo", "mafe"),
    "train-vae": ("data", "vae"),
    "train-lvdm": ("data", "pseudo", "mafe", "vae", "diffusion"),
    "sample": ("data", "pseudo", "mafe", "vae", "diffusion", "eval"),
    "evaluate": ("data", "pseudo", "mafe", "vae", "diffusion", "eval"),
}


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "skipped"
    directory: Path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=True))


def _read_json(path: Path):
    return json.loads(path.read_text())


class Pipeline:
    def __init__(self, cfg: RunConfig, root: str | Path):
        self.cfg = cfg.stage_seeded()
        self.root = Path(root)

    # -- bookkeeping ------------------------------------------------------

    def stage_hash(self, stage: str) -> str:
        return self.cfg.section_hash(*SECTIONS[stage])

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage / self.stage_hash(stage)

    def is_done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / "DONE").exists()

    def require(self, stage: str) -> None:
        for pre in PREREQUISITES[stage]:
            if not self.is_done(pre):
                raise MissingArtifactError(
                    f"stage {stage!r} needs artifacts from {pre!r} (expected {self.stage_dir(pre)}); run `{pre}` first",
                    stage=pre,
                )

    def run(self, stage: str, force: bool = False) -> StageResult:
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        out = self.stage_dir(stage)
        if self.is_done(stage) and not force:
            log.info("%s: up to date in %s, skipping", stage, out)
            return StageResult(stage, "skipped", out)
        self.require(stage)
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log.info("%s: running into %s", stage, out)
        getattr(self, "_" + stage.replace("-", "_"))(out)
        (out / "DONE").write_text(self.stage_hash(stage) + "\n")
        return StageResult(stage, "ran", out)

    def run_stages(self, stages=None, force: bool = False) -> list[StageResult]:
        wanted = STAGES if stages is None else [s for s in STAGES if s in set(stages)]
        return [self.run(s, force=force) for s in wanted]

    # -- shared loaders ---------------------------------------------------

    @property
    def dataset_dir(self) -> Path:
        return Path(self.cfg.data.root) if self.cfg.data.root else self.stage_dir("phantom-gen")

    def clips(self, split: str) -> list[VideoClip]:
        return load_video_dataset(self.dataset_dir, split)

    def all_clips(self) -> list[VideoClip]:
        splits = sorted(set(read_manifest(self.dataset_dir).values()))
        return [c for s in splits for c in self.clips(s)]

    def phantom_specs(self) -> dict[str, PhantomSpec] | None:
        path = self.dataset_dir / "phantoms.json"
        if not path.exists():
            return None
        return {vid: PhantomSpec(**d["spec"]) for vid, d in _read_json(path).items()}

    def class_labels(self) -> dict[str, int] | None:
        path = self.dataset_dir / "phantoms.json"
        if not path.exists():
            return None
        return {vid: d["label"] for vid, d in _read_json(path).items()}

    def embeddings(self) -> dict[str, np.ndarray]:
        return feature_store_dict(self.stage_dir("train-reid") / "embeddings.mcfs")

    def pair_flows(self, clips) -> dict[str, FlowField]:
        out = {}
        span = self.cfg.data.pair_span
        for clip in clips:
            pairs = sliding_pairs(clip, span)
            flows = read_flow_store(self.stage_dir("gen-flow") / f"{clip.id}.mcfl")
            if len(flows) != len(pairs):
                raise PreconditionError(f"{clip.id}: flow store holds {len(flows)} flows for {len(pairs)} pairs")
            out.update((p.key, f) for p, f in zip(pairs, flows))
        return out

    def motions(self) -> dict[str, np.ndarray]:
        return feature_store_dict(self.stage_dir("extract-motion") / "motion.mcfs")

    # -- stages -----------------------------------------------------------

    def _phantom_gen(self, out: Path) -> None:
        d = self.cfg.data
        if d.root:
            read_manifest(d.root)  # validates that the external dataset is readable
            (out / "EXTERNAL").write_text(str(d.root) + "\n")
            return
        ph = d.phantom
        rng = np.random.default_rng(self.cfg.seed)
        n_total = ph.clips + ph.test_clips
        manifest, meta = {}, {}
        for i in range(n_total):
            label = i % len(ph.amplitudes)
            spec = PhantomSpec(
                base_radius=float(rng.uniform(*ph.radius)),
                pulse_amplitude=float(ph.amplitudes[label]),
                period=int(rng.integers(ph.period[0], ph.period[1] + 1)),
                speckle_sigma=ph.speckle_sigma,
                cone_angle=ph.cone_angle,
                seed=int(rng.integers(2**31 - 1)),
                size=ph.size,
            )
            vid = f"phantom{i:04d}"
            clip, _ = generate_phantom(spec, max(ph.frames, spec.period), vid)
            save_video(out / "videos" / f"{vid}.npz", clip)
            manifest[vid] = "train" if i < ph.clips else "test"
            meta[vid] = {"spec": asdict(spec), "label": label}
        write_manifest(out, manifest)
        _write_json(out / "phantoms.json", meta)

    def _train_reid(self, out: Path) -> None:
        p = self.cfg.pseudo
        rcfg = ReidConfig(dim=self.cfg.mafe.channels[3], temperature=p.temperature, steps=p.reid_steps,
                          batch_videos=p.reid_batch, lr=p.reid_lr, seed=self.cfg.seed)
        model, losses = train_reid(self.clips("train"), rcfg)
        torch.save({"config": asdict(rcfg), "params": model.state_dict()}, out / "reid.pt")
        write_feature_store(embed_clips(model, self.all_clips()), out / "embeddings.mcfs")
        _write_json(out / "history.json", losses)

    def _gen_flow(self, out: Path) -> None:
        p = self.cfg.pseudo
        span = self.cfg.data.pair_span
        for clip in self.all_clips():
            name = f"{clip.id}.mcfl"
            if p.flow_method == "import":
                src = Path(p.flow_import_dir) / name
                if not src.exists():
                    raise MissingArtifactError(f"no imported flow file {src}", stage="gen-flow")
                n_pairs = len(sliding_pairs(clip, span))
                flows = read_flow_store(src)
                if len(flows) != n_pairs or any(f.shape != clip.shape for f in flows):
                    raise PreconditionError(f"{src}: expected {n_pairs} flows of shape {clip.shape}")
                shutil.copyfile(src, out / name)
            elif p.flow_method == "block_match":
                flows = [block_match_flow(q.I0, q.I1, p.patch, p.search, p.stride) for q in sliding_pairs(clip, span)]
                write_flow_store(flows, out / name, clip.shape)
            else:
                raise ConfigurationError(f"unknown flow method {p.flow_method!r}")

    def mafe_data(self):
        """Training and held-out pair sets, plus analytic reference flows for phantom test pairs."""
        span = self.cfg.data.pair_span
        train, test = self.clips("train"), self.clips("test")
        emb = self.embeddings()
        flows = self.pair_flows(train + test)
        train_pairs = [q for c in train for q in sliding_pairs(c, span)]
        test_pairs = [q for c in test for q in sliding_pairs(c, span)]
        specs = self.phantom_specs()
        reference = None
        if specs is not None:
            reference = [phantom_flow(specs[q.video_id], q.i0_index, q.i1_index) for q in test_pairs]
        return build_pair_set(train_pairs, emb, flows), build_pair_set(test_pairs, emb, flows), reference

    def _train_mafe(self, out: Path) -> None:
        train, test, reference = self.mafe_data()
        model, opt, history = train_mafe(train, self.cfg.mafe, log_every=max(self.cfg.mafe.steps // 10, 1))
        save_checkpoint(out / "mafe.pt", model, self.cfg.mafe, len(history), opt, self.stage_hash("train-mafe"))
        _write_json(out / "history.json", history)
        _write_json(out / "eval.json", evaluate_mafe(model, test, reference))

    def _extract_motion(self, out: Path) -> None:
        model, _, _ = load_checkpoint(self.stage_dir("train-mafe") / "mafe.pt")
        d = self.cfg.data
        records = []
        for clip in self.all_clips():
            pair = select_frame_pair(clip, d.motion_strategy, window=d.motion_window)
            records.append(FeatureRecord(clip.id, motion_vectors(model, [pair])[0]))
        write_feature_store(records, out / "motion.mcfs")

    def _train_vae(self, out: Path) -> None:
        frames = np.concatenate([c.frames for c in self.clips("train")])
        vae, losses = train_vae(frames, self.cfg.vae)
        save_vae(out / "vae.pt", vae, self.cfg.vae, self.stage_hash("train-vae"))
        _write_json(out / "history.json", losses)

    def _train_lvdm(self, out: Path) -> None:
        vae = load_vae(self.stage_dir("train-vae") / "vae.pt")
        latents = {c.id: vae_encode(vae, c.frames) for c in self.all_clips()}
        write_latent_store(latents, out / "latents.mcfs")
        train_ids = {c.id for c in self.clips("train")}
        stored = read_latent_store(out / "latents.mcfs")
        model, history = train_lvdm({k: v for k, v in stored.items() if k in train_ids}, self.motions(),
                                    self.cfg.diffusion, log_every=max(self.cfg.diffusion.steps // 10, 1))
        save_lvdm(out / "lvdm.pt", model, self.cfg.diffusion, history, self.stage_hash("train-lvdm"))
        _write_json(out / "history.json", history)

    def sample_one(self, cond_id: str, frames: int, seed: int, sampler: str | None = None, out: Path | None = None) -> Path:
        self.require("sample")
        motions = self.motions()
        if cond_id not in motions:
            raise PreconditionError(f"no motion vector for video {cond_id!r}")
        model, cfg = load_lvdm(self.stage_dir("train-lvdm") / "lvdm.pt")
        vae = load_vae(self.stage_dir("train-vae") / "vae.pt")
        size = self.clips_shape()
        clip = sample_video(model, vae, cfg.schedule(), motions[cond_id], frames, size,
                            sampler or self.cfg.eval.sampler, seed, video_id=f"{cond_id}_s{seed}")
        out = out or self.root / "samples"
        return save_video(Path(out) / f"{clip.id}.npz", clip)

    def clips_shape(self) -> tuple[int, int]:
        return self.clips("test")[0].shape

    def _sample(self, out: Path) -> None:
        e = self.cfg.eval
        manifest = {}
        for clip in self.clips("test"):
            for k in range(e.samples_per_condition):
                path = self.sample_one(clip.id, e.sample_frames, self.cfg.seed * 1000 + k, e.sampler, out / "videos")
                manifest[path.stem] = "test"  # generated clips form their own test split
        write_manifest(out, manifest)

    def _evaluate(self, out: Path) -> None:
        e = self.cfg.eval
        real = [c.frames for c in self.clips("test")]
        fake = [c.frames for c in load_video_dataset(self.stage_dir("sample"), "test")]
        report = MetricReport(f"run-{self.cfg.config_hash()}", config_hash=self.cfg.config_hash())
        vid_emb = RandomVideoEmbedder(seed=e.embedder_seed)
        for L in e.clip_lengths:
            try:
                report.add(f"fvd{L}", fvd(real, fake, vid_emb, clip_len=L), embedder=vid_emb.tag, clip_len=L)
            except PreconditionError as err:
                log.warning("fvd%d skipped: %s", L, err)
        frame_emb = RandomFrameEmbedder(seed=e.embedder_seed)
        report.add("fid", fid(np.concatenate(real), np.concatenate(fake), frame_emb), embedder=frame_emb.tag)
        labels = self.class_labels()
        if labels is not None:
            L = min(e.sample_frames, min(c.shape[0] for c in real), 16)
            train = self.clips("train")
            clf = train_motion_classifier([c.frames for c in train], [labels[c.id] for c in train], L,
                                          steps=e.classifier_steps, seed=self.cfg.seed)
            probs = clf.probs(np.stack(clip_windows(fake, L)))
            value, std = inception_score(probs)
            report.add("is", value, std, embedder=clf.name, clip_len=L)
        mafe_eval = _read_json(self.stage_dir("train-mafe") / "eval.json")
        for k in ("psnr", "psnr_blend", "ssim", "epe"):
            if k in mafe_eval:
                report.add(k, mafe_eval[k], embedder="n/a", clip_len=1)
        report.save(out)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    lambda_reid: list[float]
    lambda_flow: list[float]
    psnr: np.ndarray  # [len(lambda_reid), len(lambda_flow)], NaN for failed cells
    status: list[list[str]]

    def to_markdown(self) -> str:
        head = "| λ1 \\ λ2 | " + " | ".join(f"{v:g}" for v in self.lambda_flow) + " |"
        rule = "|" + "---|" * (len(self.lambda_flow) + 1)
        rows = [head, rule]
        for i, l1 in enumerate(self.lambda_reid):
            cells = [("failed" if self.status[i][j] != "ok" else f"{self.psnr[i, j]:.2f}") for j in range(len(self.lambda_flow))]
            rows.append(f"| {l1:g} | " + " | ".join(cells) + " |")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {"lambda_reid": self.lambda_reid, "lambda_flow": self.lambda_flow,
                "psnr": [[None if math.isnan(v) else float(v) for v in row] for row in self.psnr],
                "status": self.status}


def _ablation_cell(args):
    train, test, mafe_cfg = args
    try:
        model, _, _ = train_mafe(train, mafe_cfg)
        value = evaluate_mafe(model, test)["psnr"]
        if not math.isfinite(value):
            raise NumericalError("held-out PSNR is not finite")
        return value, "ok"
    except NumericalError as err:
        log.warning("ablation cell λ1=%g λ2=%g failed: %s", mafe_cfg.lambda_reid, mafe_cfg.lambda_flow, err)
        return float("nan"), f"failed: {err}"


def run_ablation(pipe: Pipeline, lambda_reid=None, lambda_flow=None, steps: int | None = None,
                 workers: int | None = None) -> tuple[AblationResult, Path]:
    """Train one MAFE per (λ1, λ2) cell and tabulate held-out middle-frame PSNR."""
    for pre in ("train-reid", "gen-flow"):
        if not pipe.is_done(pre):
            raise MissingArtifactError(f"ablation needs artifacts from {pre!r}; run `{pre}` first", stage=pre)
    a = pipe.cfg.ablation
    l1 = list(a.lambda_reid if lambda_reid is None else lambda_reid)
    l2 = list(a.lambda_flow if lambda_flow is None else lambda_flow)
    steps = a.steps if steps is None else steps
    workers = a.workers if workers is None else workers
    base = dataclasses.replace(pipe.cfg.mafe, steps=steps, warmup=min(pipe.cfg.mafe.warmup, max(steps // 2, 1)))
    train, test, _ = pipe.mafe_data()
    jobs = [(train, test, dataclasses.replace(base, lambda_reid=float(x), lambda_flow=float(y))) for x in l1 for y in l2]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    psnr = np.array([r[0] for r in results], dtype=np.float64).reshape(len(l1), len(l2))
    status = [[results[i * len(l2) + j][1] for j in range(len(l2))] for i in range(len(l1))]
    result = AblationResult(l1, l2, psnr, status)
    out = pipe.root / "ablate" / stable_hash({"base": pipe.cfg.section_hash("data", "pseudo", "mafe"),
                                               "l1": l1, "l2": l2, "steps": steps})
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(result.to_markdown())
    _write_json(out / "table.json", result.to_dict())
    return result, out
