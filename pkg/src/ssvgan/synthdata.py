"""Synthetic moving-circle video dataset: generation, clip file io, manifests.

Each clip shows one bright soft-edged circle over a fixed dark background
gradient. Three activities:

    0 "pass"    circle glides horizontally (sinusoid, non-integer cycle count)
    1 "still"   circle does not move; all frames are bit-identical
    2 "bounce"  circle oscillates vertically

The background gradient is intentionally asymmetric in x and y so that
rotations and shears of a clip remain identifiable, and motion is
non-periodic within a clip so frame order carries signal.

Clips are stored one file per clip: a small header (magic "SSGV", version,
frames, channels, height, width) followed by uint8 pixels, frame-major,
row-major. Pixels quantize [-1, 1] to 0..255; byte 0 decodes exactly to -1.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

ACTIVITIES = ("pass", "still", "bounce")
SPLITS = ("pretrain", "probe_train", "probe_test")
SPLIT_FRACTIONS = {"pretrain": 0.80, "probe_train": 0.16, "probe_test": 0.04}

MAGIC = b"SSGV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH4I")

# background gradient endpoints; asymmetric in x and y on purpose
_BG_BASE = -0.90
_BG_X_SPAN = 0.25
_BG_Y_SPAN = 0.10


def activity_name(activity: int) -> str:
    if activity not in (0, 1, 2):
        raise ConfigurationError(f"activity id must be 0, 1, or 2, got {activity}")
    return ACTIVITIES[activity]


def activity_id(name: str) -> int:
    try:
        return ACTIVITIES.index(name)
    except ValueError:
        raise ConfigurationError(f"unknown activity name {name!r}") from None


@dataclass
class DataConfig:
    """Parameters of one generated dataset."""

    n_clips: int = 3000
    frames: int = 16
    channels: int = 1
    side: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.frames < 2:
            raise ConfigurationError(f"frames must be >= 2, got {self.frames}")
        if self.side < 16:
            raise ConfigurationError(f"side must be >= 16, got {self.side}")
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        if self.n_clips <= 0 or self.n_clips % 75 != 0:
            raise ConfigurationError(
                f"n_clips must be a positive multiple of 75 so the three classes "
                f"split exactly 80/16/4, got {self.n_clips}"
            )


def background(side: int) -> np.ndarray:
    """The fixed (side, side) float32 background shared by every clip."""
    ys = np.linspace(0.0, 1.0, side, dtype=np.float64).reshape(side, 1)
    xs = np.linspace(0.0, 1.0, side, dtype=np.float64).reshape(1, side)
    return (_BG_BASE + _BG_X_SPAN * xs + _BG_Y_SPAN * ys).astype(np.float32)


def _render_frame(bg: np.ndarray, cy: float, cx: float, radius: float, bright: float) -> np.ndarray:
    side = bg.shape[0]
    ys = np.arange(side, dtype=np.float64).reshape(side, 1)
    xs = np.arange(side, dtype=np.float64).reshape(1, side)
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # 1px soft edge
    frame = bg + alpha.astype(np.float32) * (bright - bg)
    return frame.astype(np.float32)


def generate_clip(activity: int, seed: int, shape: tuple[int, int, int, int] = (16, 1, 32, 32)) -> np.ndarray:
    """Render one clip as a float32 array of shape (T, C, H, W) in [-1, 1]."""
    frames, channels, height, width = shape
    if height != width:
        raise ShapeError(f"frames must be square, got {height}x{width}")
    activity_name(activity)
    side = height
    rng = np.random.default_rng(seed)

    radius = side * rng.uniform(0.08, 0.16)
    bright = rng.uniform(0.70, 1.00)
    margin = math.ceil(radius) + 2
    amp_cap = (side - 1 - 2 * margin) / 2.0
    # amplitudes kept small: the downstream task should reward features
    # that actually resolve motion, not just coarse position
    amplitude = rng.uniform(0.07 * side, min(0.14 * side, amp_cap))
    cycles = rng.uniform(1.2, 1.8)  # non-integer so frame order is visible
    phase = rng.uniform(0.0, 2.0 * math.pi)
    free_lo, free_hi = float(margin), float(side - 1 - margin)
    swing_lo, swing_hi = free_lo + amplitude, free_hi - amplitude
    cy0 = rng.uniform(swing_lo, swing_hi)
    cx0 = rng.uniform(swing_lo, swing_hi)

    bg = background(side)
    if activity == 1:
        frame = _render_frame(bg, cy0, cx0, radius, bright)
        clip = np.repeat(frame[None], frames, axis=0)
    else:
        clip = np.empty((frames, side, side), dtype=np.float32)
        for t in range(frames):
            offset = amplitude * math.sin(2.0 * math.pi * cycles * t / frames + phase)
            cy = cy0 + offset if activity == 2 else cy0
            cx = cx0 + offset if activity == 0 else cx0
            clip[t] = _render_frame(bg, cy, cx, radius, bright)

    clip = clip[:, None, :, :]
    if channels > 1:
        clip = np.repeat(clip, channels, axis=1)
    return clip


def oracle_activity(clip: np.ndarray) -> int:
    """Classify a clip by tracking the bright blob's centroid across frames.

    Independent of the models: thresholds the circle against the dark
    background and compares per-axis centroid drift.
    """
    frames = clip.shape[0]
    gray = clip.mean(axis=1)  # (T, H, W)
    side = gray.shape[-1]
    ys = np.arange(side).reshape(side, 1)
    xs = np.arange(side).reshape(1, side)
    centers = np.empty((frames, 2))
    for t in range(frames):
        mask = gray[t] > -0.35
        weight = mask.sum()
        if weight == 0:
            return 1
        centers[t, 0] = (ys * mask).sum() / weight
        centers[t, 1] = (xs * mask).sum() / weight
    drift_y = float(np.ptp(centers[:, 0]))
    drift_x = float(np.ptp(centers[:, 1]))
    if max(drift_x, drift_y) < 0.75:
        return 1
    return 0 if drift_x >= drift_y else 2


def encode_clip(clip: np.ndarray) -> bytes:
    """Serialize a float clip in [-1, 1] to the on-disk byte layout."""
    if clip.ndim != 4:
        raise ShapeError(f"clip must have shape (T, C, H, W), got {clip.shape}")
    t, c, h, w = clip.shape
    pixels = np.rint((clip.astype(np.float64) + 1.0) * 127.5)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, t, c, h, w) + pixels.tobytes()


def decode_clip(blob: bytes) -> np.ndarray:
    """Parse the on-disk byte layout back to a float32 clip in [-1, 1]."""
    if len(blob) < _HEADER.size:
        raise DataError(f"clip blob too short ({len(blob)} bytes)")
    magic, version, t, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad clip magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported clip format version {version}")
    expected = _HEADER.size + t * c * h * w
    if len(blob) != expected:
        raise DataError(f"clip payload is {len(blob)} bytes, expected {expected}")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    clip = pixels.astype(np.float32) / 127.5 - 1.0
    return clip.reshape(t, c, h, w)


def write_clip(path, clip: np.ndarray) -> None:
    Path(path).write_bytes(encode_clip(clip))


def read_clip(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read clip file {path}: {exc}") from exc
    try:
        return decode_clip(blob)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


@dataclass
class ClipRecord:
    index: int
    path: str
    activity: int
    seed: int
    split: str


@dataclass
class DatasetManifest:
    """Index of a generated dataset: config echo plus one record per clip."""

    config: DataConfig
    entries: list[ClipRecord] = field(default_factory=list)
    root: Path | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        c = self.config
        return (c.frames, c.channels, c.side, c.side)

    def split_entries(self, split: str) -> list[ClipRecord]:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def to_json(self) -> str:
        payload = {
            "version": FORMAT_VERSION,
            "config": {
                "n_clips": self.config.n_clips,
                "frames": self.config.frames,
                "channels": self.config.channels,
                "side": self.config.side,
                "seed": self.config.seed,
            },
            "split_counts": {s: len(self.split_entries(s)) for s in SPLITS},
            "entries": [
                {
                    "index": e.index,
                    "path": e.path,
                    "activity": e.activity,
                    "seed": e.seed,
                    "split": e.split,
                }
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            cfg = DataConfig(**payload["config"])
            entries = [ClipRecord(**e) for e in payload["entries"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path} has unexpected structure: {exc}") from exc
        return cls(config=cfg, entries=entries, root=path.parent)


def clip_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def _assign_splits(n_clips: int, seed: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2025]))
    assignment = [""] * n_clips
    for cls in range(3):
        members = np.array([i for i in range(n_clips) if i % 3 == cls])
        rng.shuffle(members)
        n = len(members)
        n_pre = round(n * SPLIT_FRACTIONS["pretrain"])
        n_ptrain = round(n * SPLIT_FRACTIONS["probe_train"])
        for j, idx in enumerate(members):
            if j < n_pre:
                assignment[idx] = "pretrain"
            elif j < n_pre + n_ptrain:
                assignment[idx] = "probe_train"
            else:
                assignment[idx] = "probe_test"
    return assignment


def build_dataset(config: DataConfig, out_dir) -> DatasetManifest:
    """Generate every clip, write them plus manifest.json under out_dir.

    Deterministic in config.seed: same config gives byte-identical files.
    On failure nothing is left behind except the directory itself.
    """
    config.validate()
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    splits = _assign_splits(config.n_clips, config.seed)
    shape = (config.frames, config.channels, config.side, config.side)

    written: list[Path] = []
    entries: list[ClipRecord] = []
    try:
        for i in range(config.n_clips):
            activity = i % 3
            seed = clip_seed(config.seed, i)
            clip = generate_clip(activity, seed, shape)
            rel = f"clips/clip_{i:05d}.ssgv"
            write_clip(out_dir / rel, clip)
            written.append(out_dir / rel)
            entries.append(ClipRecord(index=i, path=rel, activity=activity, seed=seed, split=splits[i]))
        manifest = DatasetManifest(config=config, entries=entries, root=out_dir)
        manifest.save(out_dir / "manifest.json")
    except Exception:
        for p in written:
            try:
                os.unlink(p)
            except OSError:
                pass
        raise
    return manifest


def load_batch(manifest: DatasetManifest, split: str, indices) -> tuple[np.ndarray, np.ndarray]:
    """Load clips by position within a split's ordered entry list.

    Returns (clips, activities): float32 (N, T, C, H, W) and int64 (N,).
    """
    if manifest.root is None:
        raise DataError("manifest has no root directory; load it from disk first")
    entries = manifest.split_entries(split)
    t, c, h, w = manifest.shape
    out = np.empty((len(indices), t, c, h, w), dtype=np.float32)
    labels = np.empty(len(indices), dtype=np.int64)
    for row, pos in enumerate(indices):
        pos = int(pos)
        if not 0 <= pos < len(entries):
            raise DataError(f"index {pos} out of range for split {split!r} with {len(entries)} clips")
        entry = entries[pos]
        clip = read_clip(manifest.root / entry.path)
        if clip.shape != (t, c, h, w):
            raise DataError(f"{entry.path}: clip shape {clip.shape} does not match manifest {manifest.shape}")
        out[row] = clip
        labels[row] = entry.activity
    return out, labels


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Load an entire split in manifest order."""
    return load_batch(manifest, split, range(len(manifest.split_entries(split))))
