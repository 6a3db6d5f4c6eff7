"""Dataset ingestion (IDX, CSV), IID partitioning across workers, per-class batches.

Images are float32 arrays (m, C, H, W) in [0, 1]; labels are int64 class ids.
A bundled 10k-digit MNIST sample lives under ``desk/`` (see ``load_desk_mnist``).
"""

import csv
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ConsistencyError, EmptyClassError, FormatError, InvalidInputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DESK_DIR = os.path.join(os.path.dirname(__file__), "desk")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    n_c: int

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InvalidInputError(f"images must be (m, C, H, W), got {images.shape}")
        if len(labels) != len(images):
            raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_c):
            raise InvalidInputError(f"labels must lie in [0, {self.n_c})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def training_arrays(self):
        return self.images, self.labels

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_c)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_c)


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:need])
    count = int(np.prod(dims))
    if len(raw) < need + count:
        raise OSError(f"{path}: truncated IDX payload: expected {count} bytes, found {len(raw) - need}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=need).reshape(dims)


def load_idx(images_path, labels_path, n_c=10):
    """Read an IDX image/label pair (plain or gzipped); pixels are scaled by 1/255."""
    img = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    lab = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if img.shape[0] != lab.shape[0]:
        raise ConsistencyError(f"image count {img.shape[0]} != label count {lab.shape[0]}")
    images = (img.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return LabeledDataset(images, lab.astype(np.int64), n_c)


def save_idx(ds, images_path, labels_path):
    """Write a single-channel dataset as IDX files (pixels rounded to bytes)."""
    m, c, h, w = ds.images.shape
    if c != 1:
        raise InvalidInputError("IDX images are single-channel")
    pix = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, m, h, w))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, m))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_desk_mnist():
    """The bundled MNIST sample: (train, test) with 8000 and 2000 digits."""
    def pair(split):
        return load_idx(os.path.join(DESK_DIR, f"{split}-images-idx3-ubyte.gz"),
                        os.path.join(DESK_DIR, f"{split}-labels-idx1-ubyte.gz"))
    return pair("train"), pair("test")


def load_csv(path, shape, n_c=None):
    """Header-less CSV, one image per row: label, then C*H*W values in [0, 1].

    ``n_c`` defaults to max(label) + 1.
    """
    c, h, w = shape
    width = c * h * w
    images, labels = [], []
    with open(path, newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != width + 1:
                raise FormatError(f"{path}: row {rowno} has {len(row)} fields, expected {width + 1}", rowno)
            try:
                label = int(row[0])
                vals = np.array([float(v) for v in row[1:]], dtype=np.float32)
            except ValueError:
                raise FormatError(f"{path}: row {rowno} has a non-numeric field", rowno) from None
            if label < 0 or (n_c is not None and label >= n_c):
                raise FormatError(f"{path}: row {rowno} label {label} out of range", rowno)
            if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1:
                raise FormatError(f"{path}: row {rowno} has values outside [0, 1]", rowno)
            labels.append(label)
            images.append(vals)
    if not labels:
        raise InvalidInputError(f"{path}: no rows")
    n_c = n_c if n_c is not None else max(labels) + 1
    return LabeledDataset(np.stack(images).reshape(-1, c, h, w), np.array(labels), n_c)


def save_csv(ds, path):
    """Inverse of ``load_csv``; float32 values are written with round-trip precision."""
    flat = ds.images.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        for label, row in zip(ds.labels, flat):
            out.writerow([int(label)] + [repr(float(v)) for v in row])


def partition(ds, z, seed):
    """Split indices across ``z`` workers: shuffle each class, then deal round-robin.

    Returns a list of ``z`` sorted int64 index arrays.  Worker class counts
    differ from each other by at most one.
    """
    from .. import rng as _rng

    if z < 1:
        raise InvalidInputError(f"need at least one worker, got z={z}")
    counts = ds.class_counts()
    short = [c for c in range(ds.n_c) if counts[c] < z]
    if short:
        raise InvalidInputError(f"classes {short} have fewer than z={z} samples")
    gen = _rng.stream(seed, "partition")
    parts = [[] for _ in range(z)]
    for c in range(ds.n_c):
        idx = np.flatnonzero(ds.labels == c)
        gen.shuffle(idx)
        for k in range(z):
            parts[k].append(idx[k::z])
    return [np.sort(np.concatenate(p)) for p in parts]


def class_batch(ds, part, worker, c, batch_size, gen):
    """Up to ``batch_size`` distinct images of class ``c`` held by ``worker``.

    Returns (images, indices); indices refer to ``ds``.  If the worker holds
    no more than ``batch_size`` such images, all of them are returned once.
    """
    held = part[worker]
    mine = held[ds.labels[held] == c]
    if len(mine) == 0:
        raise EmptyClassError(f"worker {worker} holds no samples of class {c}")
    if batch_size >= len(mine):
        pick = mine
    else:
        pick = mine[gen.choice(len(mine), size=batch_size, replace=False)]
    return ds.images[pick], pick
