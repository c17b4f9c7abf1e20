"""Resizing, feature scaling and the seven geometric augmentations.

Every transform takes and returns an H x W x C float array in [0, 1]. Geometric
remaps use bilinear sampling with nearest-edge fill outside the source image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

TRANSFORMS = ("rotate", "height_shift", "width_shift", "zoom", "flip_h", "flip_v", "shear")


@dataclass
class AugmentPolicy:
    rotation_deg: float = 45.0
    height_shift_frac: float = 0.20
    width_shift_frac: float = 0.20
    zoom_frac: float = 0.10
    horizontal_flip: bool = True
    vertical_flip: bool = True
    shear_deg: float = 20.0
    multiplier: int = 1
    seed: int = 0
    # optional per-class total output counts (originals included); overrides multiplier
    class_targets: dict | None = None

    def __post_init__(self):
        if self.multiplier < 1:
            raise ValueError("multiplier must be >= 1")

    def enabled(self) -> tuple:
        names = []
        for name in TRANSFORMS:
            if name == "flip_h" and not self.horizontal_flip:
                continue
            if name == "flip_v" and not self.vertical_flip:
                continue
            names.append(name)
        return tuple(names)


def scale_features(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def _sample(img, ys, xs):
    """Bilinear lookup at fractional source coords, clamped to the border."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0)


def resize(img, out_h: int = 224, out_w: int = 224) -> np.ndarray:
    """Bilinear resize with half-pixel centres."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty image")
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample(img, yy, xx)


def _affine(img, inv):
    """Resample ``img`` where ``inv`` maps output (y, x) grids to source coords."""
    h, w = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy, sx = inv(yy, xx)
    return _sample(img, sy, sx)


def rotate(img, angle_deg: float, rng=None) -> np.ndarray:
    """Counter-clockwise rotation about the image centre."""
    if abs(angle_deg) > 180:
        raise ValueError("rotation angle must lie in [-180, 180]")
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    # snap the trig values at exact quarter turns so those rotations are pure index remaps
    ca, sa = round(ca, 12) + 0.0, round(sa, 12) + 0.0

    def inv(yy, xx):
        dy, dx = yy - cy, xx - cx
        return cy + ca * dy + sa * dx, cx - sa * dy + ca * dx

    return _affine(img, inv)


def shift(img, dx_frac: float, dy_frac: float) -> np.ndarray:
    """Integer translation by round(frac * size) pixels; vacated area repeats the edge."""
    if abs(dx_frac) > 1 or abs(dy_frac) > 1:
        raise ValueError("shift fractions must lie in [-1, 1]")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    dx = int(round(dx_frac * w))
    dy = int(round(dy_frac * h))
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols].copy()


def zoom(img, factor: float) -> np.ndarray:
    """Crop the central 1/factor of the image and resize it back to full size."""
    if factor <= 0:
        raise ValueError(f"zoom factor must be positive, got {factor}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ch = max(1, int(round(h / factor)))
    cw = max(1, int(round(w / factor)))
    top = (h - ch) // 2
    left = (w - cw) // 2
    rows = np.clip(np.arange(top, top + ch), 0, h - 1)
    cols = np.clip(np.arange(left, left + cw), 0, w - 1)
    return resize(img[rows][:, cols], h, w)


def flip_h(img) -> np.ndarray:
    return np.asarray(img)[:, ::-1].copy()


def flip_v(img) -> np.ndarray:
    return np.asarray(img)[::-1].copy()


def shear(img, angle_deg: float) -> np.ndarray:
    """Horizontal shear x' = x + tan(angle) * (y - cy)."""
    if abs(angle_deg) >= 90:
        raise ValueError("shear angle must lie in (-90, 90)")
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0:
        return img.copy()
    cy = (img.shape[0] - 1) / 2.0
    t = math.tan(math.radians(angle_deg))
    return _affine(img, lambda yy, xx: (yy, xx - t * (yy - cy)))


def random_transform(img, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply one transform chosen uniformly from the enabled set; returns (image, name, params)."""
    names = policy.enabled()
    name = names[int(rng.integers(len(names)))]
    if name == "rotate":
        a = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        return rotate(img, a), name, {"angle_deg": a}
    if name == "height_shift":
        f = float(rng.uniform(-policy.height_shift_frac, policy.height_shift_frac))
        return shift(img, 0.0, f), name, {"dy_frac": f}
    if name == "width_shift":
        f = float(rng.uniform(-policy.width_shift_frac, policy.width_shift_frac))
        return shift(img, f, 0.0), name, {"dx_frac": f}
    if name == "zoom":
        f = float(rng.uniform(1.0, 1.0 + policy.zoom_frac))
        return zoom(img, f), name, {"factor": f}
    if name == "flip_h":
        return flip_h(img), name, {}
    if name == "flip_v":
        return flip_v(img), name, {}
    a = float(rng.uniform(-policy.shear_deg, policy.shear_deg))
    return shear(img, a), name, {"angle_deg": a}


@dataclass
class AugmentedEntry:
    source_id: int
    copy_index: int  # -1 marks the untouched original
    label: int
    image: np.ndarray
    transform: str = "original"
    params: dict = field(default_factory=dict)


def _copies_per_entry(entries, policy: AugmentPolicy) -> dict:
    """Number of augmented copies for each source id."""
    if policy.class_targets is None:
        return {eid: policy.multiplier for eid, _, _ in entries}
    counts = {}
    for label in sorted({lab for _, _, lab in entries}):
        ids = [eid for eid, _, lab in entries if lab == label]
        target = int(policy.class_targets.get(label, len(ids) * (1 + policy.multiplier)))
        extra = target - len(ids)
        if extra < 0:
            raise ValueError(f"class {label} target {target} is below its {len(ids)} originals")
        base, rem = divmod(extra, len(ids))
        lucky = set(rng_for(policy.seed, "targets", label).permutation(ids)[:rem].tolist())
        for eid in ids:
            counts[eid] = base + (1 if eid in lucky else 0)
    return counts


def augment_split(entries, policy: AugmentPolicy) -> list:
    """Expand training entries ``(entry_id, image, label)`` with seeded single-transform copies.

    Originals are kept first, followed by their copies; each copy's stream is
    derived from (seed, entry_id, copy_index) so the order of work does not matter.
    """
    counts = _copies_per_entry(entries, policy)
    out = []
    for eid, img, label in entries:
        out.append(AugmentedEntry(eid, -1, label, np.asarray(img, dtype=np.float64)))
        for k in range(counts[eid]):
            rng = rng_for(policy.seed, int(eid), k)
            aug, name, params = random_transform(img, policy, rng)
            out.append(AugmentedEntry(eid, k, label, aug, name, params))
    return out


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
