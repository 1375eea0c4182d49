"""Run configuration: nested dataclasses loaded from YAML with strict key checking."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .diffusion.train import LVDMConfig
from .diffusion.vae import VAEConfig
from .errors import ConfigurationError
from .mafe.train import MAFEConfig

DEFAULT_CACHE = ".mcdm"


@dataclass
class PhantomSetConfig:
    """Synthetic dataset: clip ``i`` belongs to motion class ``i % len(amplitudes)``."""

    clips: int = 64
    test_clips: int = 16
    frames: int = 40
    size: int = 32
    amplitudes: list[float] = field(default_factory=lambda: [0.25, 0.4])
    radius: list[float] = field(default_factory=lambda: [6.0, 9.0])
    period: list[int] = field(default_factory=lambda: [24, 40])
    speckle_sigma: float = 0.05
    cone_angle: float = 90.0


@dataclass
class DataConfig:
    root: str = ""  # empty: use the generated phantom dataset
    phantom: PhantomSetConfig = field(default_factory=PhantomSetConfig)
    pair_span: int = 8
    motion_window: int = 16
    motion_strategy: str = "max_diff"


@dataclass
class PseudoConfig:
    temperature: float = 0.07
    reid_steps: int = 300
    reid_batch: int = 16
    reid_lr: float = 1e-3
    flow_method: str = "block_match"
    flow_import_dir: str = ""
    patch: int = 7
    search: int = 4
    stride: int = 2


@dataclass
class EvalConfig:
    clip_lengths: list[int] = field(default_factory=lambda: [16])
    embedder_seed: int = 0
    sample_frames: int = 16
    sampler: str = "ancestral"
    samples_per_condition: int = 1
    classifier_steps: int = 200


@dataclass
class AblationConfig:
    lambda_reid: list[float] = field(default_factory=lambda: [0.0, 1.0, 5.0, 10.0])
    lambda_flow: list[float] = field(default_factory=lambda: [0.0, 0.005, 0.01, 0.05, 0.1])
    steps: int = 200
    workers: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    mafe: MAFEConfig = field(default_factory=MAFEConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    diffusion: LVDMConfig = field(default_factory=LVDMConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _strip_seeds(asdict(self), top=True)

    def section_hash(self, *sections: str) -> str:
        """Hash of the named top-level sections plus the seed."""
        d = self.to_dict()
        payload = {k: d[k] for k in sections}
        payload["seed"] = self.seed
        return stable_hash(payload)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def stage_seeded(self) -> "RunConfig":
        """Copy with every section seed set to the run seed."""
        cfg = copy.deepcopy(self)
        for name in ("mafe", "vae", "diffusion"):
            setattr(cfg, name, dataclasses.replace(getattr(cfg, name), seed=self.seed))
        return cfg


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _strip_seeds(d: dict, top: bool = False) -> dict:
    # section seeds are always the run seed, so they are not part of the file format
    out = {}
    for k, v in d.items():
        if k == "seed" and not top:
            continue
        out[k] = _strip_seeds(v) if isinstance(v, dict) else v
    return out


def _from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)}
    if where:  # nested sections take their seed from the top level
        allowed.discard("seed")
    unknown = sorted(set(data) - allowed)
    if unknown:
        names = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigurationError(f"unknown config key(s): {names}")
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _from_dict(typ, value, key)
        else:
            kwargs[name] = _coerce(typ, value, key)
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where or 'config'}: {e}") from e


def _coerce(typ, value, key):
    origin = typing.get_origin(typ)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        (inner,) = typing.get_args(typ)
        return [_coerce(inner, v, key) for v in value]
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if typ in (int, float, str):
        if typ is str and not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        if typ is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return typ(value)
    return value


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = _from_dict(RunConfig, data or {}, "")
    c = cfg.mafe.channels
    motion_dim = 2 * (c[2] + c[3]) if len(c) == 4 else None
    if motion_dim is not None and cfg.diffusion.denoiser.conditioning_dim != motion_dim:
        raise ConfigurationError(
            f"diffusion.denoiser.conditioning_dim is {cfg.diffusion.denoiser.conditioning_dim} but mafe.channels "
            f"{c} give motion vectors of dim {motion_dim}"
        )
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# Desk-scale profile used by the tests and the ablation smoke run.
MICRO = {
    "data": {"phantom": {"clips": 16, "test_clips": 4, "frames": 40}},
    "pseudo": {"reid_steps": 100},
    "mafe": {"warmup": 100, "steps": 300},
    "vae": {"steps": 300},
    "diffusion": {"steps": 300, "batch": 4, "lr": 1e-3, "clip_frames": 8, "num_steps": 64},
    "eval": {"sample_frames": 16, "classifier_steps": 100},
    "ablation": {"steps": 100},
}

# Recorded for reference; nothing in the test suite runs it.
FULL = {
    "data": {"phantom": {"clips": 1024, "test_clips": 256, "frames": 128, "size": 112}},
    "mafe": {"warmup": 2000, "steps": 100000, "batch": 8, "lr": 2e-4},
    "vae": {"steps": 50000, "batch": 64},
    "diffusion": {"steps": 200000, "batch": 64, "lr": 1e-4, "num_steps": 1000, "clip_frames": 16,
                  "denoiser": {"base_channels": 128}},
    "eval": {"clip_lengths": [16, 128], "sample_frames": 128},
    "ablation": {"steps": 100000},
}

PROFILES = {"default": {}, "micro": MICRO, "full": FULL}


def load_config(source: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Load a profile name (``default``, ``micro``, ``full``) or a YAML file.

    A YAML file may name a base profile with a top-level ``profile`` key.
    """
    data: dict = {}
    if source is None:
        pass
    elif str(source) in PROFILES:
        data = copy.deepcopy(PROFILES[str(source)])
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        base = loaded.pop("profile", "default")
        if base not in PROFILES:
            raise ConfigurationError(f"{path}: unknown profile {base!r}; choose from {sorted(PROFILES)}")
        data = _merge(PROFILES[base], loaded)
    if overrides:
        data = _merge(data, overrides)
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def cache_root(out: str | Path | None = None) -> Path:
    """``--out`` wins, then ``$MCDM_CACHE``, then ``./.mcdm``."""
    if out:
        return Path(out)
    return Path(os.environ.get("MCDM_CACHE") or DEFAULT_CACHE)


__all__ = [
    "AblationConfig", "DataConfig", "EvalConfig", "PhantomSetConfig", "PseudoConfig", "RunConfig",
    "cache_root", "config_from_dict", "dump_config", "load_config", "stable_hash", "PROFILES",
]
