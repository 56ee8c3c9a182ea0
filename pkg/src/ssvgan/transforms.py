"""Clip transformations used as the self-supervised pretext task.

A clip is a float tensor of shape (T, C, H, W) with values in [-1, 1].
There are 11 transformation classes over four families:

    0..3   rotation by k * 90 degrees counter-clockwise (class 0 is the identity)
    4..6   translation: vertical, horizontal, both axes
    7..9   shear: vertical, horizontal, both axes
    10     temporal shuffle (a never-identity frame permutation)

All ops are pure torch so gradients flow through transformed clips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, ParameterError, ShapeError

FAMILIES = ("rotation", "translation", "shear", "temporal")

ROTATION_CLASSES = (0, 1, 2, 3)
TRANSLATION_CLASSES = (4, 5, 6)
SHEAR_CLASSES = (7, 8, 9)
TEMPORAL_CLASSES = (10,)
NUM_CLASSES = 11

FAMILY_CLASSES = {
    "rotation": ROTATION_CLASSES,
    "translation": TRANSLATION_CLASSES,
    "shear": SHEAR_CLASSES,
    "temporal": TEMPORAL_CLASSES,
}

# axis order for the three-class families
_AXIS_VARIANTS = ("vertical", "horizontal", "both")

# translation magnitude as a fraction of the frame side
TRANSLATION_MIN_FRAC = 0.10
TRANSLATION_MAX_FRAC = 0.25

# shear factor bounds
SHEAR_MIN = 0.1
SHEAR_MAX = 0.3


@dataclass(frozen=True)
class TransformLabel:
    """One sampled transformation: a class id plus its concrete parameters.

    Only the fields relevant to the family are meaningful; the rest keep
    their neutral defaults.
    """

    class_id: int
    family: str
    k: int = 0                                      # rotation quarter turns
    shift: tuple[int, int] = (0, 0)                 # (rows down, cols right)
    factors: tuple[float, float] = (0.0, 0.0)       # (vertical, horizontal) shear
    perm: tuple[int, ...] = field(default=())       # frame permutation


def class_family(class_id: int) -> str:
    """Return the family name for a transformation class id."""
    for family, ids in FAMILY_CLASSES.items():
        if class_id in ids:
            return family
    raise ParameterError(f"unknown transformation class id {class_id}")


def decode_class(class_id: int) -> tuple[str, int]:
    """Split a class id into (family, variant index within the family)."""
    family = class_family(class_id)
    return family, class_id - FAMILY_CLASSES[family][0]


def encode_class(family: str, variant: int) -> int:
    """Inverse of decode_class."""
    if family not in FAMILY_CLASSES:
        raise ParameterError(f"unknown transform family {family!r}")
    ids = FAMILY_CLASSES[family]
    if not 0 <= variant < len(ids):
        raise ParameterError(f"family {family!r} has no variant {variant}")
    return ids[variant]


def enabled_class_ids(families) -> list[int]:
    """Sorted class ids covered by the given family names."""
    names = set(families)
    unknown = names - set(FAMILIES)
    if unknown:
        raise ConfigurationError(f"unknown transform families: {sorted(unknown)}")
    if not names:
        raise ConfigurationError("at least one transform family must be enabled")
    ids: list[int] = []
    for fam in names:
        ids.extend(FAMILY_CLASSES[fam])
    return sorted(ids)


def class_mask(families) -> torch.Tensor:
    """Boolean (NUM_CLASSES,) mask with True at every enabled class id."""
    mask = torch.zeros(NUM_CLASSES, dtype=torch.bool)
    mask[enabled_class_ids(families)] = True
    return mask


def _check_clip(clip: torch.Tensor) -> tuple[int, int, int, int]:
    if not isinstance(clip, torch.Tensor):
        raise ShapeError(f"clip must be a torch.Tensor, got {type(clip).__name__}")
    if clip.dim() != 4:
        raise ShapeError(f"clip must have shape (T, C, H, W), got {tuple(clip.shape)}")
    t, c, h, w = clip.shape
    if t < 2:
        raise ShapeError(f"clip needs at least 2 frames, got {t}")
    return t, c, h, w


def apply_rotation(clip: torch.Tensor, k: int) -> torch.Tensor:
    """Rotate every frame by k quarter turns counter-clockwise."""
    _, _, h, w = _check_clip(clip)
    if h != w:
        raise ShapeError(f"rotation needs square frames, got {h}x{w}")
    if k not in (0, 1, 2, 3):
        raise ParameterError(f"rotation k must be in 0..3, got {k}")
    if k == 0:
        return clip
    return torch.rot90(clip, k, dims=(-2, -1))


def apply_translation(clip: torch.Tensor, axis: str, magnitudes: tuple[int, int]) -> torch.Tensor:
    """Shift frames by whole pixels, filling vacated pixels with -1.

    Args:
        axis: "vertical", "horizontal", or "both".
        magnitudes: (dy, dx); positive dy moves content down, positive dx
            moves content right. The inactive component must be zero.
    """
    _, _, h, w = _check_clip(clip)
    if axis not in _AXIS_VARIANTS:
        raise ParameterError(f"translation axis must be one of {_AXIS_VARIANTS}, got {axis!r}")
    dy, dx = int(magnitudes[0]), int(magnitudes[1])
    if axis == "vertical" and (dy == 0 or dx != 0):
        raise ParameterError(f"vertical translation needs dy != 0 and dx == 0, got {(dy, dx)}")
    if axis == "horizontal" and (dx == 0 or dy != 0):
        raise ParameterError(f"horizontal translation needs dx != 0 and dy == 0, got {(dy, dx)}")
    if axis == "both" and (dy == 0 or dx == 0):
        raise ParameterError(f"both-axis translation needs dy != 0 and dx != 0, got {(dy, dx)}")
    max_dy = math.floor(TRANSLATION_MAX_FRAC * h)
    max_dx = math.floor(TRANSLATION_MAX_FRAC * w)
    if abs(dy) > max_dy or abs(dx) > max_dx:
        raise ParameterError(
            f"translation {(dy, dx)} exceeds the {TRANSLATION_MAX_FRAC:.0%} bound "
            f"({max_dy}, {max_dx}) for {h}x{w} frames"
        )

    out = torch.full_like(clip, -1.0)
    # destination rows [max(0,dy), h+min(0,dy)) take source rows shifted by -dy
    dst_y = slice(max(0, dy), h + min(0, dy))
    src_y = slice(max(0, -dy), h + min(0, -dy))
    dst_x = slice(max(0, dx), w + min(0, dx))
    src_x = slice(max(0, -dx), w + min(0, -dx))
    out[:, :, dst_y, dst_x] = clip[:, :, src_y, src_x]
    return out


def apply_shear(clip: torch.Tensor, axis: str, factors: tuple[float, float]) -> torch.Tensor:
    """Shear frames about the frame center, filling uncovered pixels with -1.

    Uses nearest-neighbour inverse mapping. A horizontal shear with factor s
    sends column x to x + s * (y - cy); a vertical shear sends row y to
    y + s * (x - cx). "both" composes the two in a single affine map.

    Args:
        axis: "vertical", "horizontal", or "both".
        factors: (sy, sx) shear factors; the inactive one must be zero.
    """
    _, _, h, w = _check_clip(clip)
    if axis not in _AXIS_VARIANTS:
        raise ParameterError(f"shear axis must be one of {_AXIS_VARIANTS}, got {axis!r}")
    sy, sx = float(factors[0]), float(factors[1])
    if axis == "vertical" and (sy == 0.0 or sx != 0.0):
        raise ParameterError(f"vertical shear needs sy != 0 and sx == 0, got {(sy, sx)}")
    if axis == "horizontal" and (sx == 0.0 or sy != 0.0):
        raise ParameterError(f"horizontal shear needs sx != 0 and sy == 0, got {(sy, sx)}")
    if axis == "both" and (sy == 0.0 or sx == 0.0):
        raise ParameterError(f"both-axis shear needs sy != 0 and sx != 0, got {(sy, sx)}")
    if abs(sy) > SHEAR_MAX or abs(sx) > SHEAR_MAX:
        raise ParameterError(f"shear factors {(sy, sx)} exceed the |s| <= {SHEAR_MAX} bound")

    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    ys = torch.arange(h, dtype=torch.float64).reshape(h, 1) - cy
    xs = torch.arange(w, dtype=torch.float64).reshape(1, w) - cx
    # forward map: [y', x'] = M [y, x] with M = [[1, sy], [sx, 1]]; invert exactly
    det = 1.0 - sy * sx
    src_y = torch.round((ys - sy * xs) / det + cy).long()
    src_x = torch.round((-sx * ys + xs) / det + cx).long()
    inside = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    gathered = clip[:, :, src_y.clamp(0, h - 1), src_x.clamp(0, w - 1)]
    fill = torch.full_like(gathered, -1.0)
    return torch.where(inside, gathered, fill)


def apply_shuffle(clip: torch.Tensor, perm) -> torch.Tensor:
    """Reorder frames by the given permutation, which must not be the identity."""
    t, _, _, _ = _check_clip(clip)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(t)):
        raise ParameterError(f"perm must be a permutation of range({t}), got {perm}")
    if perm == tuple(range(t)):
        raise ParameterError("temporal shuffle must not be the identity permutation")
    index = torch.as_tensor(perm, dtype=torch.long, device=clip.device)
    return clip.index_select(0, index)


def sample_transform(enabled_families, rng: np.random.Generator, frames: int, side: int) -> TransformLabel:
    """Draw a transformation label uniformly over the enabled class ids.

    Args:
        enabled_families: iterable of family names; must be non-empty.
        rng: numpy Generator; consumed deterministically (class id first,
            then per-family parameters in a fixed order).
        frames: clip length T, needed to size shuffle permutations.
        side: frame side H (= W), needed to size translation magnitudes.
    """
    ids = enabled_class_ids(enabled_families)
    class_id = int(ids[rng.integers(len(ids))])
    family = class_family(class_id)

    if family == "rotation":
        return TransformLabel(class_id=class_id, family=family, k=class_id)

    if family == "translation":
        axis = _AXIS_VARIANTS[class_id - TRANSLATION_CLASSES[0]]
        lo = TRANSLATION_MIN_FRAC * side
        hi = TRANSLATION_MAX_FRAC * side
        cap = math.floor(hi)

        def draw_shift() -> int:
            mag = int(round(rng.uniform(lo, hi)))
            mag = min(max(mag, 1), cap)
            sign = 1 if rng.integers(2) == 1 else -1
            return sign * mag

        dy = draw_shift() if axis in ("vertical", "both") else 0
        dx = draw_shift() if axis in ("horizontal", "both") else 0
        return TransformLabel(class_id=class_id, family=family, shift=(dy, dx))

    if family == "shear":
        axis = _AXIS_VARIANTS[class_id - SHEAR_CLASSES[0]]

        def draw_factor() -> float:
            mag = rng.uniform(SHEAR_MIN, SHEAR_MAX)
            sign = 1.0 if rng.integers(2) == 1 else -1.0
            return float(sign * mag)

        sy = draw_factor() if axis in ("vertical", "both") else 0.0
        sx = draw_factor() if axis in ("horizontal", "both") else 0.0
        return TransformLabel(class_id=class_id, family=family, factors=(sy, sx))

    # temporal: rejection-sample a non-identity permutation
    while True:
        perm = tuple(int(p) for p in rng.permutation(frames))
        if perm != tuple(range(frames)):
            return TransformLabel(class_id=class_id, family=family, perm=perm)


def apply(label: TransformLabel, clip: torch.Tensor) -> torch.Tensor:
    """Apply a sampled transformation label to a clip."""
    if label.family == "rotation":
        return apply_rotation(clip, label.k)
    if label.family == "translation":
        axis = _AXIS_VARIANTS[label.class_id - TRANSLATION_CLASSES[0]]
        return apply_translation(clip, axis, label.shift)
    if label.family == "shear":
        axis = _AXIS_VARIANTS[label.class_id - SHEAR_CLASSES[0]]
        return apply_shear(clip, axis, label.factors)
    if label.family == "temporal":
        return apply_shuffle(clip, label.perm)
    raise ParameterError(f"unknown transform family {label.family!r}")
