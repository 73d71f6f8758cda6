"""Scan-line image benchmarks: IDX (MNIST) and CIFAR-10 binary readers."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..data import SequenceBatch

IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
             0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
LUMA = np.array([0.299, 0.587, 0.114])
CIFAR_RECORD = 1 + 32 * 32 * 3


class FormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("truncated IDX header at offset 0")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or dtype_code not in IDX_TYPES:
        raise FormatError(f"bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x} at offset 0")
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"truncated IDX dimensions at offset 4")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    dt = np.dtype(IDX_TYPES[dtype_code])
    count = int(np.prod(dims, dtype=np.int64))
    need = start + count * dt.itemsize
    if len(data) < need:
        raise FormatError(f"truncated IDX payload: expected {need} bytes, file ends at offset {len(data)}")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=start)
    return arr.reshape(dims).astype(dt.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    if arr.dtype not in codes:
        raise TypeError("write_idx supports uint8/int8 arrays")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, codes[arr.dtype], arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (images (N, 32, 32, 3) uint8, labels (N,) int64)."""
    data = _read_bytes(path)
    if len(data) % CIFAR_RECORD:
        n_full = len(data) // CIFAR_RECORD
        raise FormatError(f"truncated CIFAR-10 record at offset {n_full * CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels > 9):
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"invalid CIFAR-10 label {labels[bad]} at offset {bad * CIFAR_RECORD}")
    imgs = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return imgs, labels


def to_grayscale(imgs: np.ndarray) -> np.ndarray:
    return imgs.astype(np.float64) @ LUMA


def scanline(images: np.ndarray, labels: np.ndarray, task: str) -> SequenceBatch:
    """Flatten (N, rows, cols) images row-major into (N, rows*cols, 1) sequences in [0, 1]."""
    n = images.shape[0]
    seq = (images.reshape(n, -1, 1) / 255.0).astype(np.float32)
    return SequenceBatch(seq, labels.astype(np.int64), task)


def _find(root: Path, stems) -> Path:
    for stem in stems:
        for cand in (root / stem, root / (stem + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {stems} found under {root}")


def load_images(source: str, path, n_val: int | None = None, limit: int | None = None) -> dict[str, SequenceBatch]:
    """Train/val/test splits of a scan-line image benchmark.

    ``source`` is ``smnist`` (a directory holding the four IDX files) or
    ``scifar`` (the CIFAR-10 binary batches). The last ``n_val`` training
    images become the validation split; ``limit`` truncates the training
    split for smoke runs.
    """
    root = Path(path)
    if source == "smnist":
        tr_x = read_idx(_find(root, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]))
        tr_y = read_idx(_find(root, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]))
        te_x = read_idx(_find(root, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]))
        te_y = read_idx(_find(root, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]))
        n_val = 10000 if n_val is None else n_val
        task = "smnist"
    elif source == "scifar":
        parts = [read_cifar_batch(_find(root, [f"data_batch_{i}.bin"])) for i in range(1, 6)]
        tr_x = to_grayscale(np.concatenate([p[0] for p in parts]))
        tr_y = np.concatenate([p[1] for p in parts])
        te_x, te_y = read_cifar_batch(_find(root, ["test_batch.bin"]))
        te_x = to_grayscale(te_x)
        n_val = 5000 if n_val is None else n_val
        task = "scifar"
    else:
        raise ValueError(f"unknown image source {source!r}")
    if len(tr_x) != len(tr_y) or len(te_x) != len(te_y):
        raise FormatError("image and label counts differ")
    if n_val >= len(tr_x):
        raise ValueError(f"validation size {n_val} leaves no training images")
    cut = len(tr_x) - n_val
    train = scanline(tr_x[:cut], tr_y[:cut], task)
    if limit is not None:
        train = train.subset(slice(0, limit))
    return {
        "train": train,
        "val": scanline(tr_x[cut:], tr_y[cut:], task),
        "test": scanline(te_x, te_y, task),
    }
