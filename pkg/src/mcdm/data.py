"""Video ingestion, frame-pair selection, phantom generation and binary stores.

Store layouts (all little-endian):

* Feature store ``MCFS``: magic, version u32 = 1, count u32, then per record
  ``id_len u16, id bytes (UTF-8), dim u32, dim x f32``.
* Flow store ``MCFL``: magic, version u32 = 1, H u32, W u32, T u32, then
  ``T x (2 x H x W) x f32``; for each field the u-plane precedes the v-plane,
  both row-major.
* Manifest: plain text lines ``id,split``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError, StoreFormatError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
VIDEO_SUFFIXES = (".npz", ".npy", ".avi")
MANIFEST_NAME = "manifest.txt"

FEATURE_MAGIC = b"MCFS"
FLOW_MAGIC = b"MCFL"
STORE_VERSION = 1

# Vertical elongation of the phantom chamber relative to its horizontal radius.
_ELLIPSE_ASPECT = 1.2
_SPECKLE_CORRELATION = 1.5  # px, Gaussian smoothing of the speckle noise
_EDGE_WIDTH = 1.2  # px, logistic wall edge


@dataclass
class VideoClip:
    id: str
    frames: np.ndarray  # [T, H, W] float32 in [0, 1]
    fps: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise PreconditionError(f"clip {self.id!r}: frames must be [T, H, W], got {self.frames.shape}")
        if self.frames.shape[0] < 3:
            raise PreconditionError(f"clip {self.id!r}: need at least 3 frames, got {self.frames.shape[0]}")
        if not np.all(np.isfinite(self.frames)):
            raise PreconditionError(f"clip {self.id!r}: non-finite intensities")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise PreconditionError(f"clip {self.id!r}: intensities outside [0, 1]")
        if self.fps <= 0:
            raise PreconditionError(f"clip {self.id!r}: fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class FramePair:
    video_id: str
    i0_index: int
    i1_index: int
    mid_index: int
    I0: np.ndarray
    I1: np.ndarray
    I_GT: np.ndarray

    def __post_init__(self):
        if not self.i0_index < self.mid_index < self.i1_index:
            raise PreconditionError(
                f"frame pair indices must satisfy i0 < mid < i1, got "
                f"({self.i0_index}, {self.mid_index}, {self.i1_index})"
            )

    @property
    def key(self) -> str:
        return f"{self.video_id}#{self.i0_index}-{self.i1_index}"


@dataclass
class FlowField:
    """Dense displacement field in pixels: ``I1(p + (u, v)) ~ I0(p)``."""

    u: np.ndarray
    v: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise PreconditionError(f"flow planes must be matching [H, W], got {self.u.shape} and {self.v.shape}")
        if self.valid_mask is not None:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.u.shape:
                raise PreconditionError("valid_mask shape differs from flow shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """Stacked ``[2, H, W]`` array (u then v)."""
        return np.stack([self.u, self.v])

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy())

    @classmethod
    def from_array(cls, arr, valid_mask=None) -> "FlowField":
        arr = np.asarray(arr)
        return cls(arr[0], arr[1], valid_mask)


@dataclass(frozen=True)
class PhantomSpec:
    """Beating-chamber phantom parameters.

    ``size`` and ``fps`` are not motion parameters; they fix the frame grid.
    """

    base_radius: float = 8.0
    pulse_amplitude: float = 0.2
    period: int = 16
    speckle_sigma: float = 0.05
    cone_angle: float = 90.0
    seed: int = 0
    size: int = 32
    fps: float = 50.0

    def __post_init__(self):
        if self.period < 4:
            raise PreconditionError(f"phantom period must be >= 4, got {self.period}")
        if not 0.0 <= self.pulse_amplitude < 1.0:
            raise PreconditionError(f"pulse_amplitude must lie in [0, 1), got {self.pulse_amplitude}")
        if self.speckle_sigma < 0:
            raise PreconditionError("speckle_sigma must be >= 0")
        if self.base_radius <= 0 or self.size < 8:
            raise PreconditionError("base_radius must be positive and size >= 8")

    def radius(self, t: float) -> float:
        return self.base_radius * (1.0 + self.pulse_amplitude * math.sin(2.0 * math.pi * t / self.period))

    @property
    def center(self) -> tuple[float, float]:
        # (x, y); slightly below the image middle so the chamber sits inside the sector
        return (self.size - 1) / 2.0, 0.55 * (self.size - 1)


@dataclass
class FeatureRecord:
    id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError(f"feature record {self.id!r} has non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


# ---------------------------------------------------------------------------
# manifest and video files


def read_manifest(root: str | Path) -> dict[str, str]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise ConfigurationError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.lower() == "id,split":
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ConfigurationError(f"{path}:{lineno}: expected 'id,split' with split in {SPLITS}, got {raw!r}")
        entries[parts[0]] = parts[1]
    return entries


def write_manifest(root: str | Path, entries: dict[str, str]) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{vid},{split}\n" for vid, split in entries.items()))
    return path


def _to_unit_gray(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 4:
        arr = arr.astype(np.float64).mean(axis=-1)
    if arr.ndim != 3:
        raise ValueError(f"expected [T, H, W] or [T, H, W, C] video, got shape {arr.shape}")
    if np.issubdtype(np.asarray(arr).dtype, np.integer) or arr.max(initial=0) > 1.0:
        arr = arr.astype(np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def load_video_file(path: str | Path) -> tuple[np.ndarray, float]:
    """Read one clip as ``([T, H, W] float32 in [0, 1], fps)``."""
    path = Path(path)
    fps = 50.0
    if path.suffix == ".npz":
        with np.load(path) as z:
            frames = z["frames"]
            if "fps" in z:
                fps = float(z["fps"])
    elif path.suffix == ".npy":
        frames = np.load(path)
    elif path.suffix == ".avi":
        import cv2

        cap = cv2.VideoCapture(str(path))
        fps = cap.get(cv2.CAP_PROP_FPS) or fps
        grabbed = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            grabbed.append(frame)
        cap.release()
        frames = np.stack(grabbed) if grabbed else np.zeros((0, 1, 1))
    else:
        raise ValueError(f"unsupported video container: {path.suffix}")
    frames = _to_unit_gray(frames)
    if frames.shape[0] == 0:
        raise ValueError(f"{path} has no frames")
    return frames, fps


def save_video(path: str | Path, clip: VideoClip) -> Path:
    """Lossless 8-bit container (``.npz`` with ``frames`` and ``fps``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(np.clip(clip.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    np.savez_compressed(path, frames=quantized, fps=np.float64(clip.fps))
    return path


def _find_video(root: Path, vid: str) -> Path | None:
    for folder in (root / "videos", root):
        for suffix in VIDEO_SUFFIXES:
            candidate = folder / f"{vid}{suffix}"
            if candidate.is_file():
                return candidate
    return None


def load_video_dataset(root_path: str | Path, split: str) -> list[VideoClip]:
    """Load every clip of ``split`` listed in ``<root>/manifest.txt``.

    Unreadable or empty files are skipped with a warning; an empty result is
    an error.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root_path)
    manifest = read_manifest(root)
    clips = []
    for vid, vsplit in manifest.items():
        if vsplit != split:
            continue
        path = _find_video(root, vid)
        if path is None:
            log.warning("video %s listed in manifest but not found under %s; skipping", vid, root)
            continue
        try:
            frames, fps = load_video_file(path)
            clips.append(VideoClip(vid, frames, fps))
        except Exception as exc:  # noqa: BLE001 - any decode failure means skip
            log.warning("skipping unreadable video %s: %s", path, exc)
    if not clips:
        raise ConfigurationError(f"split {split!r} under {root} contains no readable clips")
    return clips


# ---------------------------------------------------------------------------
# phantom


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _cone_mask(spec: PhantomSpec, xs, ys) -> np.ndarray:
    apex_x = (spec.size - 1) / 2.0
    angle = np.degrees(np.arctan2(np.abs(xs - apex_x), ys + 0.5))
    return (angle <= spec.cone_angle / 2.0).astype(np.float64)


def _elliptic_norm(spec: PhantomSpec, xs, ys) -> np.ndarray:
    cx, cy = spec.center
    return np.sqrt((xs - cx) ** 2 + ((ys - cy) / _ELLIPSE_ASPECT) ** 2)


def _band_width(spec: PhantomSpec) -> float:
    # wide enough that the radial map stays monotone: max |g'| * |dr| < 1
    return max(2.5, 1.2 * spec.pulse_amplitude * spec.base_radius)


def _wall_profile(spec: PhantomSpec, m: np.ndarray) -> np.ndarray:
    """Displacement weight g(m): a Gaussian bump at the wall, exactly zero beyond 3 widths."""
    d2 = ((m - spec.base_radius) / _band_width(spec)) ** 2
    return np.clip((np.exp(-d2) - math.exp(-9.0)) / (1.0 - math.exp(-9.0)), 0.0, None)


def _deformed_radius(spec: PhantomSpec, m: np.ndarray, t: float) -> np.ndarray:
    """Elliptic radius at frame ``t`` of the material point with rest radius ``m``."""
    return m + (spec.radius(t) - spec.base_radius) * _wall_profile(spec, m)


def _material_radius(spec: PhantomSpec, s: np.ndarray, t: float) -> np.ndarray:
    if spec.pulse_amplitude == 0.0:
        return s
    grid = np.linspace(0.0, float(s.max()) + 4.0 * _band_width(spec) + spec.base_radius, 8192)
    return np.interp(s, _deformed_radius(spec, grid, t), grid)


def _speckle_field(spec: PhantomSpec) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(spec.seed)
    noise = gaussian_filter(rng.standard_normal((spec.size, spec.size)), _SPECKLE_CORRELATION, mode="reflect")
    return spec.speckle_sigma * noise / max(float(noise.std()), 1e-12)


def _render_frame(spec: PhantomSpec, t: float, speckle: np.ndarray, cone: np.ndarray, xs, ys) -> np.ndarray:
    from scipy.ndimage import map_coordinates

    s = _elliptic_norm(spec, xs, ys)
    m = _material_radius(spec, s, t)
    cx, cy = spec.center
    ratio = np.divide(m, s, out=np.ones_like(s), where=s > 0)
    qx, qy = cx + (xs - cx) * ratio, cy + (ys - cy) * ratio
    texture = map_coordinates(speckle, [qy, qx], order=3, mode="nearest")
    # dark chamber, bright wall; the soft edge keeps frames band-limited so sub-pixel warps stay faithful
    tissue = 0.15 + 0.55 / (1.0 + np.exp(-(m - spec.base_radius) / _EDGE_WIDTH))
    return np.clip(cone * (tissue + texture), 0.0, 1.0)


def phantom_flow(spec: PhantomSpec, t0: float, t1: float) -> FlowField:
    """Analytic displacement of every pixel of frame ``t0`` into frame ``t1``.

    The tissue deforms radially (in the chamber's elliptic metric) by
    ``(r(t) - R) * g(m)`` where ``g`` is a bump around the rest wall radius
    ``R``; outside that band, and outside the imaging cone, the flow is zero.
    """
    xs, ys = _pixel_grid(spec.size)
    s = _elliptic_norm(spec, xs, ys)
    m = _material_radius(spec, s, t0)
    s1 = _deformed_radius(spec, m, t1)
    scale = np.divide(s1, s, out=np.ones_like(s), where=s > 0) - 1.0
    cone = _cone_mask(spec, xs, ys) > 0
    cx, cy = spec.center
    u = np.where(cone, scale * (xs - cx), 0.0)
    v = np.where(cone, scale * (ys - cy), 0.0)
    return FlowField(u, v)


def generate_phantom(spec: PhantomSpec, num_frames: int, video_id: str | None = None) -> tuple[VideoClip, list[FlowField]]:
    """Render a cone-masked pulsing ellipse whose seeded speckle moves with the tissue.

    Returns the clip and the ``num_frames - 1`` analytic inter-frame flows
    (``t -> t + 1``).
    """
    if num_frames < spec.period:
        raise PreconditionError(f"num_frames ({num_frames}) must be >= period ({spec.period})")
    xs, ys = _pixel_grid(spec.size)
    cone = _cone_mask(spec, xs, ys)
    speckle = _speckle_field(spec)
    frames = np.stack([_render_frame(spec, t, speckle, cone, xs, ys) for t in range(num_frames)])
    flows = [phantom_flow(spec, t, t + 1) for t in range(num_frames - 1)]
    vid = video_id if video_id is not None else f"phantom_{spec.seed}"
    return VideoClip(vid, frames.astype(np.float32), spec.fps), flows


# ---------------------------------------------------------------------------
# frame pairs


def _pair(clip: VideoClip, i0: int, i1: int) -> FramePair:
    mid = (i0 + i1) // 2
    f = clip.frames
    return FramePair(clip.id, i0, i1, mid, f[i0], f[i1], f[mid])


def select_frame_pair(clip: VideoClip, strategy: str = "max_diff", window: int = 16, start: int = 0) -> FramePair:
    """Pick (I0, I1, I_GT) from a clip.

    ``max_diff`` searches all pairs with ``2 <= i1 - i0 <= window`` for the
    largest mean absolute difference; ties go to the lexicographically smallest
    indices. ``fixed_stride`` returns ``(start, start + window)``.
    """
    T = clip.num_frames
    if window < 3 or T < window:
        raise PreconditionError(f"need clip.T >= window >= 3, got T={T}, window={window}")
    if strategy == "fixed_stride":
        if start < 0 or start + window >= T:
            raise PreconditionError(f"fixed_stride pair ({start}, {start + window}) exceeds clip length {T}")
        return _pair(clip, start, start + window)
    if strategy != "max_diff":
        raise PreconditionError(f"unknown frame-pair strategy {strategy!r}")
    frames = clip.frames.astype(np.float64)
    best, best_pair = -1.0, (0, 2)
    for i0 in range(T - 2):
        hi = min(T, i0 + window + 1)
        if i0 + 2 >= hi:
            continue
        scores = np.abs(frames[i0 + 2 : hi] - frames[i0]).mean(axis=(1, 2))
        j = int(np.argmax(scores))
        if scores[j] > best:
            best, best_pair = float(scores[j]), (i0, i0 + 2 + j)
    return _pair(clip, *best_pair)


def sliding_pairs(clip: VideoClip, span: int) -> list[FramePair]:
    """All pairs ``(t, t + span)``; the training unit for the feature extractor."""
    if span < 2:
        raise PreconditionError("pair span must be >= 2 so that a middle frame exists")
    return [_pair(clip, t, t + span) for t in range(clip.num_frames - span)]


# ---------------------------------------------------------------------------
# binary stores


def _read_exact(buf: memoryview, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise StoreFormatError(f"truncated store while reading {what} (need {n} bytes at offset {offset}, have {len(buf) - offset})")
    return bytes(buf[offset : offset + n]), offset + n


def write_feature_store(records: Sequence[FeatureRecord], path: str | Path) -> Path:
    path = Path(path)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise PreconditionError("feature store ids must be unique")
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise StoreFormatError(f"feature store requires a uniform dim, got {sorted(dims)}")
    chunks = [FEATURE_MAGIC, struct.pack("<II", STORE_VERSION, len(records))]
    for rec in records:
        raw_id = rec.id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise PreconditionError(f"record id too long: {rec.id[:32]}...")
        chunks.append(struct.pack("<H", len(raw_id)))
        chunks.append(raw_id)
        chunks.append(struct.pack("<I", rec.dim))
        chunks.append(rec.values.astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def read_feature_store(path: str | Path) -> list[FeatureRecord]:
    buf = memoryview(Path(path).read_bytes())
    magic, off = _read_exact(buf, 0, 4, "magic")
    if magic != FEATURE_MAGIC:
        raise StoreFormatError(f"bad magic in {path}: expected {FEATURE_MAGIC!r}, found {magic!r} (magic mismatch)")
    header, off = _read_exact(buf, off, 8, "header")
    version, count = struct.unpack("<II", header)
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported feature store version {version}")
    records = []
    dim0 = None
    for i in range(count):
        raw, off = _read_exact(buf, off, 2, f"record {i} id length")
        (id_len,) = struct.unpack("<H", raw)
        raw_id, off = _read_exact(buf, off, id_len, f"record {i} id")
        raw, off = _read_exact(buf, off, 4, f"record {i} dim")
        (dim,) = struct.unpack("<I", raw)
        if dim0 is None:
            dim0 = dim
        elif dim != dim0:
            raise StoreFormatError(f"record {i} has dim {dim}, store dim is {dim0}")
        payload, off = _read_exact(buf, off, 4 * dim, f"record {i} values")
        values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        records.append(FeatureRecord(raw_id.decode("utf-8"), values))
    if off != len(buf):
        raise StoreFormatError(f"{len(buf) - off} trailing bytes after {count} records in {path}")
    return records


def feature_store_dict(path: str | Path) -> dict[str, np.ndarray]:
    return {r.id: r.values for r in read_feature_store(path)}


def write_flow_store(flows: Iterable[FlowField], path: str | Path, shape: tuple[int, int] | None = None) -> Path:
    """Write flows of one shape; ``shape`` is required for an empty sequence."""
    flows = list(flows)
    if flows:
        shape = flows[0].shape
    if shape is None:
        raise PreconditionError("shape must be given when writing an empty flow store")
    H, W = shape
    chunks = [FLOW_MAGIC, struct.pack("<IIII", STORE_VERSION, H, W, len(flows))]
    for f in flows:
        if f.shape != (H, W):
            raise StoreFormatError(f"flow shape {f.shape} differs from store shape {(H, W)}")
        chunks.append(f.as_array().astype("<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def read_flow_store(path: str | Path) -> list[FlowField]:
    buf = memoryview(Path(path).read_bytes())
    magic, off = _read_exact(buf, 0, 4, "magic")
    if magic != FLOW_MAGIC:
        raise StoreFormatError(f"bad magic in {path}: expected {FLOW_MAGIC!r}, found {magic!r} (magic mismatch)")
    header, off = _read_exact(buf, off, 16, "header")
    version, H, W, T = struct.unpack("<IIII", header)
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported flow store version {version}")
    n = T * 2 * H * W
    payload, off = _read_exact(buf, off, 4 * n, "flow planes")
    if off != len(buf):
        raise StoreFormatError(f"{len(buf) - off} trailing bytes in {path}")
    planes = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(T, 2, H, W)
    return [FlowField(p[0], p[1]) for p in planes]
