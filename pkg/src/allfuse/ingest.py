"""Dataset discovery, image decoding and stratified train/val/test splitting."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, DecodeError
from .seeding import rng_for

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".raw", ".afim")
AFIM_MAGIC = b"AFIM"
TEST_FRACTION = 0.20
VAL_FRACTION = 0.20
MIN_PER_CLASS = 5


@dataclass
class DatasetIndex:
    entries: list  # (Path, label) pairs, sorted by path
    class_names: list

    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)


@dataclass
class SplitIndex:
    train: list
    validation: list
    test: list
    seed: int

    def split_of(self) -> dict:
        out = {}
        for name, ids in (("train", self.train), ("val", self.validation), ("test", self.test)):
            for i in ids:
                out[i] = name
        return out


# ---------------------------------------------------------------- images


def encode_afim(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise ValueError(f"AFIM stores uint8 pixels, got {arr.dtype}")
    h, w, c = arr.shape
    return AFIM_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(arr).tobytes()


def decode_afim(blob: bytes, source="<bytes>") -> np.ndarray:
    if len(blob) < 16 or blob[:4] != AFIM_MAGIC:
        raise DecodeError(f"{source}: not an AFIM image")
    h, w, c = struct.unpack_from("<III", blob, 4)
    if len(blob) != 16 + h * w * c:
        raise DecodeError(f"{source}: AFIM payload is {len(blob) - 16} bytes, expected {h * w * c}")
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(h, w, c).copy()


def write_afim(path, pixels):
    Path(path).write_bytes(encode_afim(pixels))


def _to_rgb(arr: np.ndarray, source) -> np.ndarray:
    if arr.ndim == 2:
        arr = arr[:, :, None]
    c = arr.shape[2]
    if c == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif c == 4:
        arr = arr[:, :, :3]
    elif c != 3:
        raise DecodeError(f"{source}: unsupported channel count {c}")
    return np.ascontiguousarray(arr)


def load_image(path) -> np.ndarray:
    """Decode PNG/JPEG/AFIM into an H x W x 3 uint8 RGB array."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read ({exc})") from exc
    if blob[:4] == AFIM_MAGIC:
        return _to_rgb(decode_afim(blob, path), path)
    try:
        with Image.open(io.BytesIO(blob)) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    if arr.dtype != np.uint8:
        raise DecodeError(f"{path}: unsupported bit depth {arr.dtype}")
    return _to_rgb(arr, path)


# ---------------------------------------------------------------- scanning


def scan_dataset(root, class_dirs=("notall", "all"), validate=True) -> DatasetIndex:
    """Index ``root/<class_dirs[0]>`` as label 0 and ``root/<class_dirs[1]>`` as label 1."""
    root = Path(root)
    if len(class_dirs) != 2:
        raise ConfigError(f"exactly two class directories are required, got {list(class_dirs)}")
    entries = []
    for label, name in enumerate(class_dirs):
        d = root / name
        if not d.is_dir():
            raise ConfigError(f"class directory {d} does not exist")
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class {name!r} has zero samples")
        for p in files:
            if validate:
                load_image(p)
            entries.append((p, label))
    entries.sort(key=lambda e: e[0].as_posix())
    return DatasetIndex(entries=entries, class_names=list(class_dirs))


# ---------------------------------------------------------------- splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _allocate(total: int, sizes: list) -> list:
    """Split ``total`` across classes proportionally (largest remainder, ties to lower class)."""
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split_dataset(index: DatasetIndex, seed: int) -> SplitIndex:
    """Stratified 80/20 train/test split, then 20% of train carved off as validation."""
    labels = index.labels()
    by_class = [np.flatnonzero(labels == c) for c in (0, 1)]
    for c, ids in enumerate(by_class):
        if len(ids) < MIN_PER_CLASS:
            raise DataError(
                f"class {index.class_names[c]!r} has {len(ids)} samples; "
                f"at least {MIN_PER_CLASS} are needed to stratify"
            )
    shuffled = [rng_for(seed, "split", c).permutation(ids).tolist() for c, ids in enumerate(by_class)]

    n_test = _allocate(_round_half_up(TEST_FRACTION * len(labels)), [len(s) for s in shuffled])
    test = [i for s, k in zip(shuffled, n_test) for i in s[:k]]
    rest = [s[k:] for s, k in zip(shuffled, n_test)]
    n_val = _allocate(_round_half_up(VAL_FRACTION * sum(len(r) for r in rest)), [len(r) for r in rest])
    val = [i for r, k in zip(rest, n_val) for i in r[:k]]
    train = [i for r, k in zip(rest, n_val) for i in r[k:]]
    return SplitIndex(train=sorted(train), validation=sorted(val), test=sorted(test), seed=seed)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestRow:
    path: Path
    label: int
    split: str


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), base.resolve())).as_posix()


def write_manifest(path, rows) -> None:
    """CSV ``path,label,split``; paths stored relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for r in rows:
            if r.split not in ("train", "val", "test"):
                raise ValueError(f"bad split name {r.split!r}")
            w.writerow([_rel(r.path, base), int(r.label), r.split])


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise DataError(f"{path}: bad manifest header {header}")
        for rec in reader:
            p, lab, split = rec
            if lab not in ("0", "1") or split not in ("train", "val", "test"):
                raise DataError(f"{path}: bad manifest row {rec}")
            rows.append(ManifestRow(Path(os.path.normpath(base / p)), int(lab), split))
    return rows


def manifest_rows(index: DatasetIndex, split: SplitIndex) -> list:
    which = split.split_of()
    return [ManifestRow(p, lab, which[i]) for i, (p, lab) in enumerate(index.entries)]


def index_from_manifest(rows, class_names) -> DatasetIndex:
    return DatasetIndex(entries=[(r.path, r.label) for r in rows], class_names=list(class_names))
