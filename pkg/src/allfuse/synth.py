"""Seeded two-class stand-in for blood-smear crops.

Class 0 ("notall") draws one or two soft Gaussian-textured blobs; class 1
("all") draws a bright ring around a dark nucleus-like centre. Position, size,
tint and background noise vary per image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .seeding import rng_for

CLASS_DIRS = ("notall", "all")


def _background(rng, size):
    base = rng.uniform(0.55, 0.75)
    tint = rng.uniform(-0.05, 0.05, size=3)
    img = np.full((size, size, 3), base) + tint
    return img + rng.normal(0.0, 0.04, size=(size, size, 3))


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def blob_image(rng, size=64) -> np.ndarray:
    img = _background(rng, size)
    yy, xx = _grid(size)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        s = rng.uniform(0.08, 0.16) * size
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        texture = rng.normal(0.0, 0.08, size=(size, size))
        colour = np.array([rng.uniform(0.5, 0.7), rng.uniform(0.2, 0.35), rng.uniform(0.45, 0.65)])
        img = img * (1 - mask[..., None]) + (colour + texture[..., None]) * mask[..., None]
    return np.clip(img, 0.0, 1.0)


def ring_image(rng, size=64) -> np.ndarray:
    img = _background(rng, size)
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.14, 0.24) * size
    width = rng.uniform(0.035, 0.06) * size
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ring = np.exp(-((d - r) ** 2) / (2 * width * width))
    core = 1.0 / (1.0 + np.exp((d - 0.55 * r) / (0.05 * size)))
    colour = np.array([rng.uniform(0.5, 0.7), rng.uniform(0.2, 0.35), rng.uniform(0.45, 0.65)])
    img = img * (1 - ring[..., None]) + colour * ring[..., None]
    img = img * (1 - 0.85 * core[..., None])
    return np.clip(img, 0.0, 1.0)


def make_image(label: int, seed: int, index: int, size: int = 64) -> np.ndarray:
    rng = rng_for(seed, "synth", label, index)
    return ring_image(rng, size) if label == 1 else blob_image(rng, size)


def make_arrays(n_per_class: int, seed: int, size: int = 64, offset: int = 0):
    """Images [2n, size, size, 3] in [0, 1] (class 0 first) and labels [2n]."""
    xs, ys = [], []
    for label in (0, 1):
        for i in range(n_per_class):
            xs.append(make_image(label, seed, offset + i, size))
            ys.append(label)
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)


def write_dataset(root, n_per_class: int, seed: int, size: int = 64, class_dirs=CLASS_DIRS) -> list:
    """Write PNGs under ``root/<class_dir>/``; returns the written paths."""
    from PIL import Image

    root = Path(root)
    paths = []
    for label, cname in enumerate(class_dirs):
        d = root / cname
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = make_image(label, seed, i, size)
            px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            p = d / f"{cname}_{i:05d}.png"
            Image.fromarray(px, mode="RGB").save(p, format="PNG", optimize=False)
            paths.append(p)
    return paths


def uniform_noise(n: int, seed: int, size: int = 64) -> np.ndarray:
    return rng_for(seed, "noise").random((n, size, size, 3)).astype(np.float32)
