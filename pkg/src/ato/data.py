"""Datasets: seeded Gaussian class clusters, IDX image files, stratified splits."""
from dataclasses import dataclass
import gzip
import logging
import struct

import numpy as np

from .tensor import Rng, STREAM_DATA

log = logging.getLogger(__name__)


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


def synthetic(n_train, n_test, shape=(3, 8, 8), n_classes=10, separation=1.0, seed=0):
    """Balanced class clusters around random image templates plus unit Gaussian noise.

    Larger ``separation`` scales the templates and makes the task easier.
    """
    rng = Rng(seed, STREAM_DATA)
    templates = rng.normal((n_classes,) + tuple(shape)) * separation

    def draw(n):
        y = np.arange(n) % n_classes
        y = y[rng.permutation(n)]
        x = templates[y] + rng.normal((n,) + tuple(shape))
        return Dataset(x, y.astype(np.int64), n_classes)

    return draw(n_train), draw(n_test)


def batches(n, batch_size, rng=None):
    """Index arrays of consecutive mini-batches; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def split_dataset(d, fraction, rng):
    """Stratified random subset of ``d`` (``d`` itself is untouched).

    Each class contributes round(fraction * count) samples.
    """
    if not 0.0 < fraction < 1.0:
        if fraction == 1.0:
            log.warning("controller subset fraction 1.0 reuses the full dataset")
        else:
            raise DataConfigError("fraction must lie in (0, 1)")
    picks = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.y == c)
        if idx.size == 0:
            continue
        k = int(round(fraction * idx.size))
        if k < 1:
            raise DataConfigError(f"fraction {fraction} leaves class {c} without samples")
        picks.append(idx[rng.permutation(idx.size)[:k]])
    sel = np.sort(np.concatenate(picks))
    return d, d.subset(sel)


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataConfigError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DataConfigError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[code])
    count = int(np.prod(dims)) if dims else 1
    payload = raw[4 + 4 * ndim:]
    if len(payload) != count * dtype.itemsize:
        raise DataConfigError(f"{path}: payload size does not match header")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr):
    arr = np.asarray(arr)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes[arr.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(np.dtype(_IDX_TYPES[code])).tobytes())


def load_idx_pair(images_path, labels_path, n_classes=10):
    """MNIST-style image/label files as a Dataset with pixels scaled to [0, 1]."""
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) != len(labels):
        raise DataConfigError("image and label counts differ")
    return Dataset(images / 255.0, labels, n_classes)
