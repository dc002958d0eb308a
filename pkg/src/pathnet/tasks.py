"""Supervised tasks: IDX ingestion, noisy binary MNIST pairs, synthetic fixtures.

A ``TaskSpec`` is a factory. ``task.stream(k)`` returns an independent,
reproducible sample stream keyed by ``(task.seed, k)``, so every worker can
own one.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import DTYPE, rng_stream

IDX_UBYTE = 0x08
LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
DATA_DIR_ENV = "PATHNET_DATA_DIR"


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.offset = offset


class DataError(RuntimeError):
    pass


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw uint8 contents of an IDX file, shaped by its header."""
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "truncated magic number")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim not in (1, 3):
        raise IdxFormatError(path, 0, f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(path, len(raw), f"truncated payload, expected {need} bytes")
    if len(raw) > need:
        raise IdxFormatError(path, need, f"{len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and (n, rows, cols) images")
    body = struct.pack(">HBB", 0, IDX_UBYTE, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(body)


def load_idx(images_path, labels_path):
    """Images as float64 ``(n, rows, cols)`` in [0, 1] and labels as int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(images_path, 0, "expected an image file (magic 0x00000803)")
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, 0, "expected a label file (magic 0x00000801)")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(DTYPE) / 255.0, labels.astype(np.int64)


def find_mnist(data_dir=None, split="train"):
    """Locate MNIST IDX files in ``data_dir`` (or ``$PATHNET_DATA_DIR``)."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV) or "data/mnist"
    prefix = "train" if split == "train" else "t10k"
    found = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for cand in (stem, stem + ".gz"):
            p = os.path.join(data_dir, cand)
            if os.path.exists(p):
                found.append(p)
                break
        else:
            raise DataError(f"{stem}[.gz] not found in {data_dir!r}; see `pathnet fetch-data`")
    return tuple(found)


def salt_pepper(image: np.ndarray, noise_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each pixel, with probability ``noise_prob``, by 0 or 1 (equally likely)."""
    if noise_prob <= 0.0:
        return image.copy()
    # one uniform per pixel: u < p/2 -> 1 (salt), p/2 <= u < p -> 0 (pepper)
    u = rng.random(image.shape)
    out = np.where(u < noise_prob, 0.0, image)
    out[u < 0.5 * noise_prob] = 1.0
    return out


class DatasetStream:
    """Shuffled epochs over a fixed sample set with noise re-drawn per emission."""

    def __init__(self, x: np.ndarray, y: np.ndarray, noise_prob: float, rng: np.random.Generator):
        self.x, self.y, self.noise_prob, self.rng = x, y, noise_prob, rng
        self._order = rng.permutation(len(y))
        self._pos = 0

    def _indices(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._pos == len(self._order):
                self._order = self.rng.permutation(len(self.y))
                self._pos = 0
            take = min(n, len(self._order) - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            n -= take
        return np.concatenate(out)

    def next_batch(self, n: int):
        idx = self._indices(n)
        x = self.x[idx]
        if self.noise_prob > 0.0:
            x = salt_pepper(x, self.noise_prob, self.rng)
        return x, self.y[idx]


class GeneratorStream:
    def __init__(self, sample: Callable, rng: np.random.Generator):
        self.sample, self.rng = sample, rng

    def next_batch(self, n: int):
        return self.sample(self.rng, n)


@dataclass
class TaskSpec:
    task_id: str
    classes: int
    input_dim: int
    make_stream: Callable[[np.random.Generator], object]
    seed: int = 0
    stop_threshold: float = 0.998

    def stream(self, stream_id: int = 0):
        return self.make_stream(rng_stream(self.seed, stream_id))


NOISE_MODES = ("per_emission", "fixed")
NOISE_STREAM = 2**32 - 2


def make_binary_task(digits, images: np.ndarray, labels: np.ndarray, noise_prob: float = 0.5,
                     seed: int = 0, task_id: str | None = None, stop_threshold: float = 0.998,
                     noise_mode: str = "per_emission") -> TaskSpec:
    """Digit ``a`` vs digit ``b``, relabelled 0/1, with salt-and-pepper corruption.

    ``noise_mode="per_emission"`` re-draws the corruption every time an image
    is emitted. ``"fixed"`` corrupts each image once, from ``seed``, so the
    training set is a fixed collection of noisy images that can be fitted
    exactly.
    """
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {noise_mode!r}")
    a, b = (int(d) for d in digits)
    if a == b or not (0 <= a <= 9 and 0 <= b <= 9):
        raise ValueError(f"need two distinct digits in [0, 9], got {digits}")
    keep = (labels == a) | (labels == b)
    if not np.any(labels == a) or not np.any(labels == b):
        raise DataError(f"no images of digit {a if not np.any(labels == a) else b}")
    x = images[keep].reshape(int(keep.sum()), -1).astype(DTYPE, copy=False)
    y = (labels[keep] == b).astype(np.int64)
    stream_noise = noise_prob
    if noise_mode == "fixed":
        x = salt_pepper(x, noise_prob, rng_stream(seed, NOISE_STREAM))
        stream_noise = 0.0
    return TaskSpec(
        task_id=task_id or f"mnist{a}v{b}",
        classes=2,
        input_dim=x.shape[1],
        make_stream=lambda rng: DatasetStream(x, y, stream_noise, rng),
        seed=seed,
        stop_threshold=stop_threshold,
    )


SYNTHETIC_KINDS = ("linear", "xor", "parity")


def make_synthetic(kind: str, dim: int, seed: int = 0, k: int = 2, task_id: str | None = None,
                   stop_threshold: float = 0.998) -> TaskSpec:
    """Noise-free synthetic binary tasks (Bayes accuracy 1.0).

    ``linear``: uniform points in [0, 1]^dim labelled by a random hyperplane
    through the centre. ``xor``: random bits, label = bit0 xor bit1.
    ``parity``: random bits, label = parity of the first ``k`` bits.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if kind == "linear":
        w = rng_stream(seed, 2**32 - 1).standard_normal(dim)

        def sample(rng, n):
            x = rng.random((n, dim))
            return x, ((x - 0.5) @ w > 0).astype(np.int64)
    elif kind in ("xor", "parity"):
        kk = 2 if kind == "xor" else k
        if not 1 <= kk <= dim:
            raise ValueError(f"parity over {kk} bits needs dim >= {kk}")

        def sample(rng, n):
            x = rng.integers(0, 2, size=(n, dim)).astype(DTYPE)
            return x, (x[:, :kk].sum(axis=1).astype(np.int64) % 2)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    return TaskSpec(
        task_id=task_id or f"{kind}{dim}",
        classes=2,
        input_dim=dim,
        make_stream=lambda rng: GeneratorStream(sample, rng),
        seed=seed,
        stop_threshold=stop_threshold,
    )
