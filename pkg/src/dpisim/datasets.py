"""Digit samples: IDX reader/writer, CSV sample directories and preprocessing."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataFormatError(ValueError):
    pass


def _open(path: Path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) of unsigned bytes."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: expected {int(np.prod(dims))} bytes, found {body.size}")
    return body.reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = True) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES
    elif array.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("IDX writer supports image stacks (3-d) and label vectors (1-d)")
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress:
        # mtime fixed so the bytes do not depend on when the file was written
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def pool_and_pad(images: np.ndarray, size: int = 16, pool: int = 2) -> np.ndarray:
    """Average-pool ``pool x pool`` blocks, then center-crop/pad to ``size x size``.

    Returns flattened intensities in [0, 1], shape (n, size*size).
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    n, h, w = images.shape
    h2, w2 = h // pool, w // pool
    x = images[:, :h2 * pool, :w2 * pool].reshape(n, h2, pool, w2, pool).mean(axis=(2, 4))
    out = np.zeros((n, size, size))
    # source and destination windows for a centered crop or pad
    def span(src, dst):
        if src >= dst:
            a = (src - dst) // 2
            return slice(a, a + dst), slice(0, dst)
        a = (dst - src) // 2
        return slice(0, src), slice(a, a + src)
    sr, dr = span(h2, size)
    sc, dc = span(w2, size)
    out[:, dr, dc] = x[:, sr, sc]
    scale = 255.0 if images.max(initial=0) > 1.0 else 1.0
    return np.clip(out / scale, 0.0, 1.0).reshape(n, size * size)


@dataclass
class DigitSet:
    x: np.ndarray        # (n, channels) intensities in [0, 1]
    labels: np.ndarray   # (n,) ints in {0, 1}
    source: str

    def __len__(self):
        return len(self.labels)

    def stratified(self, limit: int) -> "DigitSet":
        """First ``limit`` samples with classes interleaved, keeping the class ratio."""
        if limit >= len(self):
            return self
        idx = []
        per = {c: list(np.flatnonzero(self.labels == c)) for c in np.unique(self.labels)}
        frac = {c: len(v) / len(self) for c, v in per.items()}
        quota = {c: int(round(frac[c] * limit)) for c in per}
        for c in per:
            idx.extend(per[c][:quota[c]])
        idx = sorted(idx)[:limit]
        return DigitSet(self.x[idx], self.labels[idx], self.source)


def _filter01(images, labels, source, size, pool):
    labels = np.asarray(labels)
    keep = (labels == 0) | (labels == 1)
    return DigitSet(pool_and_pad(images[keep], size, pool), labels[keep].astype(np.int64), source)


def load_idx_pair(images_path, labels_path, size: int = 16, pool: int = 2) -> DigitSet:
    images, labels = read_idx(images_path), read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataFormatError(f"{images_path}/{labels_path}: images and labels do not pair up")
    return _filter01(images, labels, str(images_path), size, pool)


def load_csv_dir(path, channels: int = 256) -> DigitSet:
    """Directory of per-sample CSV files named ``<anything>_<label>.csv``.

    Each file holds ``channels`` intensities in [0, 1] (any line layout).
    """
    path = Path(path)
    files = sorted(path.glob("*.csv"))
    if not files:
        raise DataFormatError(f"{path}: no sample CSV files")
    xs, ys = [], []
    for f in files:
        try:
            label = int(f.stem.rsplit("_", 1)[1])
        except (IndexError, ValueError):
            raise DataFormatError(f"{f}: file name must end in _<label>.csv") from None
        vals = np.array([float(v) for v in f.read_text().replace("\n", ",").split(",") if v.strip()])
        if vals.size != channels:
            raise DataFormatError(f"{f}: {vals.size} values, expected {channels}")
        if np.any(vals < 0) or np.any(vals > 1):
            raise DataFormatError(f"{f}: intensities must lie in [0, 1]")
        xs.append(vals)
        ys.append(label)
    ds = DigitSet(np.array(xs), np.array(ys, dtype=np.int64), str(path))
    keep = (ds.labels == 0) | (ds.labels == 1)
    return DigitSet(ds.x[keep], ds.labels[keep], ds.source)


BUNDLED = {
    "train": ("digits01-train-images-idx3-ubyte.gz", "digits01-train-labels-idx1-ubyte.gz"),
    "test": ("digits01-test-images-idx3-ubyte.gz", "digits01-test-labels-idx1-ubyte.gz"),
}


def load_digits(split: str, data_dir=None, size: int = 16, pool: int = 2) -> DigitSet:
    """0/1 digit samples for ``split`` from ``data_dir`` or the bundled subset.

    ``data_dir`` may hold the standard IDX files (``train-images-idx3-ubyte[.gz]``
    and friends, or the ``t10k`` names for the test split) or a CSV sample
    directory named after the split.
    """
    if split not in BUNDLED:
        raise ValueError(f"unknown split {split!r}")
    if data_dir is not None:
        d = Path(data_dir)
        prefix = "train" if split == "train" else "t10k"
        for img_name, lab_name in ((f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"),
                                   BUNDLED[split]):
            for suffix in ("", ".gz"):
                img = d / (img_name if img_name.endswith(".gz") else img_name + suffix)
                lab = d / (lab_name if lab_name.endswith(".gz") else lab_name + suffix)
                if img.exists() and lab.exists():
                    return load_idx_pair(img, lab, size, pool)
        if (d / split).is_dir():
            return load_csv_dir(d / split, size * size)
        raise DataFormatError(f"{d}: no IDX files or '{split}' CSV directory found")
    root = resources.files("dpisim") / "data"
    img_name, lab_name = BUNDLED[split]
    with resources.as_file(root / img_name) as img, resources.as_file(root / lab_name) as lab:
        ds = load_idx_pair(img, lab, size, pool)
    ds.source = f"bundled:{split}"
    return ds
