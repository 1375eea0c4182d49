"""Training, evaluation and checkpointing for the feature extractor."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from ..data import FlowField, FramePair
from ..errors import NumericalError, PseudoLabelMissingError
from ..metrics import psnr, ssim
from ..pseudo import embedding_key, flow_loss, reid_loss
from .model import MAFE, extract_motion_vector
from .pyramid import LossWeights, laplacian_loss, total_loss

log = logging.getLogger(__name__)


@dataclass
class MAFEConfig:
    channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    attention_window: int = 7
    head_width: int = 32
    pyramid_levels: int = 3
    lambda_reid: float = 1.0
    lambda_flow: float = 0.01
    lr: float = 2e-4
    lr_min_ratio: float = 0.1
    weight_decay: float = 1e-4
    warmup: int = 2000
    steps: int = 2000
    batch: int = 8
    schedule: str = "cosine"
    seed: int = 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_reid, self.lambda_flow)


@dataclass
class PairSet:
    """Stacked training tensors for a list of frame pairs."""

    keys: list[str]
    I0: torch.Tensor  # [N, 1, H, W]
    I1: torch.Tensor
    I_GT: torch.Tensor
    embeddings: torch.Tensor | None = None  # [N, 2, D]
    flows: torch.Tensor | None = None  # [N, 2, H, W]
    flow_masks: torch.Tensor | None = None  # [N, 1, H, W]

    def __len__(self):
        return len(self.keys)

    def subset(self, idx) -> "PairSet":
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return PairSet([self.keys[i] for i in idx.tolist()], self.I0[idx], self.I1[idx], self.I_GT[idx],
                       pick(self.embeddings), pick(self.flows), pick(self.flow_masks))


def build_pair_set(
    pairs: Sequence[FramePair],
    embeddings: Mapping[str, np.ndarray] | None = None,
    flows: Mapping[str, FlowField] | None = None,
) -> PairSet:
    """Stack pairs; ``flows`` is keyed by ``FramePair.key``, embeddings by ``video_id#frame``."""

    def frames(attr):
        return torch.from_numpy(np.stack([getattr(p, attr) for p in pairs]).astype(np.float32)).unsqueeze(1)

    emb = None
    if embeddings is not None:
        rows = []
        for p in pairs:
            pair_emb = []
            for idx in (p.i0_index, p.i1_index):
                key = embedding_key(p.video_id, idx)
                if key not in embeddings:
                    raise PseudoLabelMissingError(f"no pseudo embedding for key {key!r}")
                pair_emb.append(embeddings[key])
            rows.append(np.stack(pair_emb))
        emb = torch.from_numpy(np.stack(rows).astype(np.float32))
    fl = masks = None
    if flows is not None:
        arrs, ms = [], []
        for p in pairs:
            if p.key not in flows:
                raise PseudoLabelMissingError(f"no pseudo flow for pair {p.key!r}")
            f = flows[p.key]
            arrs.append(f.as_array())
            ms.append(np.ones(f.shape, bool) if f.valid_mask is None else f.valid_mask)
        fl = torch.from_numpy(np.stack(arrs).astype(np.float32))
        masks = torch.from_numpy(np.stack(ms)).unsqueeze(1)
    return PairSet([p.key for p in pairs], frames("I0"), frames("I1"), frames("I_GT"), emb, fl, masks)


def build_model(cfg: MAFEConfig) -> MAFE:
    return MAFE(cfg.channels, cfg.attention_window, cfg.head_width, seed=cfg.seed)


def lr_factor(step: int, cfg: MAFEConfig) -> float:
    """Linear warmup, then cosine decay to ``lr_min_ratio``."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return (step + 1) / cfg.warmup
    if cfg.schedule != "cosine":
        return 1.0
    span = max(cfg.steps - cfg.warmup, 1)
    progress = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr_min_ratio + (1.0 - cfg.lr_min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))


def loss_terms(model: MAFE, batch: PairSet, cfg: MAFEConfig) -> dict[str, torch.Tensor]:
    out = model(batch.I0, batch.I1)
    pred = out.prediction
    terms = {"laplacian": laplacian_loss(pred.frame, batch.I_GT, cfg.pyramid_levels)}
    zero = pred.frame.new_zeros(())
    terms["reid"] = reid_loss(out.appearance[3], batch.embeddings) if cfg.lambda_reid > 0 else zero
    terms["flow"] = flow_loss(pred.flow_t0, pred.flow_t1, batch.flows, batch.flow_masks) if cfg.lambda_flow > 0 else zero
    terms["total"] = total_loss(terms["laplacian"], terms["reid"], terms["flow"], cfg.weights)
    return terms


def train_mafe(data: PairSet, cfg: MAFEConfig, model: MAFE | None = None, log_every: int = 0):
    """Seeded AdamW training. Returns ``(model, optimizer, history)``.

    ``history`` holds one dict of float loss terms per step.
    """
    if cfg.lambda_reid > 0 and data.embeddings is None:
        raise PseudoLabelMissingError("lambda_reid > 0 but the pair set carries no pseudo embeddings")
    if cfg.lambda_flow > 0 and data.flows is None:
        raise PseudoLabelMissingError("lambda_flow > 0 but the pair set carries no pseudo flows")
    torch.manual_seed(cfg.seed)
    model = model or build_model(cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg))
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for step in range(cfg.steps):
        idx = torch.randint(len(data), (min(cfg.batch, len(data)),), generator=gen)
        terms = loss_terms(model, data.subset(idx), cfg)
        if not torch.isfinite(terms["total"]):
            raise NumericalError(f"non-finite MAFE loss at step {step}")
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
        sched.step()
        history.append({k: v.item() for k, v in terms.items()})
        if log_every and step % log_every == 0:
            log.info("mafe step %d %s", step, " ".join(f"{k}={v:.4f}" for k, v in history[-1].items()))
    model.eval()
    return model, opt, history


@torch.no_grad()
def predict(model: MAFE, data: PairSet, batch: int = 32):
    """Middle frames ``[N, H, W]`` and full I0->I1 flow estimates ``[N, 2, H, W]``.

    The full flow is ``flow_t1 - flow_t0``, i.e. twice the mean half-flow.
    """
    model.eval()
    frames, full = [], []
    for s in range(0, len(data), batch):
        pred = model(data.I0[s : s + batch], data.I1[s : s + batch]).prediction
        frames.append(pred.frame[:, 0])
        full.append(pred.flow_t1 - pred.flow_t0)
    return torch.cat(frames).numpy(), torch.cat(full).numpy()


def evaluate_mafe(model: MAFE, data: PairSet, reference_flows: Sequence[FlowField] | None = None) -> dict[str, float]:
    """Mean PSNR/SSIM of predicted middle frames, the (I0+I1)/2 baseline, and optional EPE."""
    from ..metrics import endpoint_error

    frames, full = predict(model, data)
    gt = data.I_GT[:, 0].numpy()
    blend = ((data.I0 + data.I1) / 2)[:, 0].numpy()
    side = min(gt.shape[-2:])
    win = min(11, side if side % 2 else side - 1)  # largest odd window that fits
    res = {
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(frames, gt)])),
        "psnr_blend": float(np.mean([psnr(a, b) for a, b in zip(blend, gt)])),
        "ssim": float(np.mean([ssim(a, b, window=win) for a, b in zip(frames, gt)])),
    }
    if reference_flows is not None:
        res["epe"] = float(np.mean([endpoint_error(FlowField.from_array(f), ref) for f, ref in zip(full, reference_flows)]))
    return res


@torch.no_grad()
def motion_vectors(model: MAFE, pairs: Sequence[FramePair], batch: int = 16) -> np.ndarray:
    model.eval()
    data = build_pair_set(pairs)
    out = []
    for s in range(0, len(data), batch):
        res = model(data.I0[s : s + batch], data.I1[s : s + batch], synthesize=False)
        out.append(extract_motion_vector(res.motion))
    return torch.cat(out).numpy()


def save_checkpoint(path: str | Path, model: MAFE, cfg: MAFEConfig, step: int, optimizer=None, config_hash: str = "") -> Path:
    """``torch.save`` container: config hash, step, named f32 tensors, optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "mafe",
            "config_hash": config_hash,
            "config": asdict(cfg),
            "step": step,
            "params": {k: v.detach().float() for k, v in model.state_dict().items()},
            "optimizer": None if optimizer is None else optimizer.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[MAFE, MAFEConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = MAFEConfig(**blob["config"])
    model = build_model(cfg)
    model.load_state_dict(blob["params"])
    model.eval()
    return model, cfg, blob
