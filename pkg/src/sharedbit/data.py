"""Datasets: IDX files, the 5k MNIST subset shipped with mlxtend, and a synthetic generator."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file: 4-byte magic, big-endian int32 dims, raw payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IDXError(f"{path}: bad magic, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    if magic >> 16 != 0:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}")
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_DTYPES or ndim == 0:
        raise IDXError(f"{path}: unsupported type code 0x{code:02x} / ndim {ndim}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXError(f"{path}: truncated dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head != need:
        raise IDXError(f"{path}: payload is {len(raw) - head} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    """Write a uint8 array as IDX."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype != np.uint8:
        raise IDXError("write_idx only emits unsigned-byte payloads")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_mnist_idx(path) -> np.ndarray:
    """Images become (N, 1, H, W) float32 scaled to [0, 1]; labels become int64."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    magic = struct.unpack(">I", head)[0] if len(head) == 4 else None
    if magic == IMAGES_MAGIC:
        arr = read_idx(path, IMAGES_MAGIC)
        return (arr.astype(np.float32) / 255.0)[:, None, :, :]
    if magic == LABELS_MAGIC:
        return read_idx(path, LABELS_MAGIC).astype(np.int64)
    found = "truncated" if magic is None else f"0x{magic:08x}"
    raise IDXError(f"{path}: expected magic 0x{IMAGES_MAGIC:08x} or 0x{LABELS_MAGIC:08x}, found {found}")


def load_mnist_pair(images_path, labels_path) -> Dataset:
    x, y = load_mnist_idx(images_path), load_mnist_idx(labels_path)
    if x.ndim != 4 or y.ndim != 1 or len(x) != len(y):
        raise IDXError(f"image/label files disagree: {x.shape} vs {y.shape}")
    return Dataset(x, y)


def mnist5k() -> Dataset:
    """The 5,000-image MNIST subset bundled with mlxtend (500 per class)."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return Dataset((x.astype(np.float32) / 255.0).reshape(-1, 1, 28, 28), y.astype(np.int64))


def synthetic(n: int, classes: int = 10, shape=(1, 8, 8), noise: float = 1.0, seed: int = 0) -> Dataset:
    """Gaussian clusters around per-class prototypes, squashed into [0, 1]."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(0.0, 1.0, size=(classes,) + tuple(shape))
    y = rng.integers(0, classes, size=n)
    z = protos[y] + noise * rng.normal(0.0, 1.0, size=(n,) + tuple(shape))
    x = 1.0 / (1.0 + np.exp(-z))
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def split(ds: Dataset, sizes: tuple[int, ...], seed: int = 0) -> list[Dataset]:
    """Shuffle once with ``seed`` and cut into consecutive parts of the given sizes."""
    if sum(sizes) > len(ds):
        raise ValueError(f"split sizes {sizes} exceed dataset size {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for s in sizes:
        out.append(ds.subset(perm[start : start + s]))
        start += s
    return out


def load_dataset(spec: dict, base_dir: str = ".") -> dict[str, Dataset]:
    """Build train/val/test splits from a dataset spec.

    ``{"kind": "mnist5k"}``, ``{"kind": "synthetic", ...}`` or
    ``{"kind": "idx", "train_images": ..., "train_labels": ..., "test_images": ..., "test_labels": ...}``.
    """
    kind = spec.get("kind", "mnist5k")
    seed = int(spec.get("split_seed", 0))
    if kind == "mnist5k":
        ds = mnist5k()
        n_val, n_test = int(spec.get("val", 500)), int(spec.get("test", 1000))
        train, val, test = split(ds, (len(ds) - n_val - n_test, n_val, n_test), seed)
    elif kind == "synthetic":
        shape = tuple(spec.get("shape", (1, 8, 8)))
        n = int(spec.get("n", 1000))
        n_val, n_test = int(spec.get("val", n // 5)), int(spec.get("test", n // 5))
        ds = synthetic(n + n_val + n_test, int(spec.get("classes", 10)), shape, float(spec.get("noise", 1.0)), int(spec.get("seed", 0)))
        train, val, test = split(ds, (n, n_val, n_test), seed)
    elif kind == "idx":
        def p(key):
            return os.path.join(base_dir, spec[key])

        full = load_mnist_pair(p("train_images"), p("train_labels"))
        test = load_mnist_pair(p("test_images"), p("test_labels"))
        n_val = int(spec.get("val", 2000))
        train, val = split(full, (len(full) - n_val, n_val), seed)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    limit = spec.get("train_limit")
    if limit:
        train = train.subset(np.arange(min(int(limit), len(train))))
    return {"train": train, "val": val, "test": test}
