"""
Dataset ingestion and the one-vs-rest evaluation protocol.

Readers cover MNIST / Fashion-MNIST IDX files and CIFAR-10 binary batches.
``make_synthetic`` renders a small blobs-vs-rings task that needs no files.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

IDX_UBYTE = 0x08
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

NORMAL, ABNORMAL = 0, 1


@dataclass
class Dataset:
    """Images ``[n, h, w, c]`` in [0, 1] with class labels and optional normal/abnormal roles."""

    images: np.ndarray
    class_labels: np.ndarray
    role_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, h, w, c], got shape {self.images.shape}")
        n = len(self.images)
        if len(self.class_labels) != n:
            raise DataError(f"{n} images but {len(self.class_labels)} class labels")
        if self.role_labels is not None:
            self.role_labels = np.asarray(self.role_labels, dtype=np.int64)
            if len(self.role_labels) != n:
                raise DataError(f"{n} images but {len(self.role_labels)} role labels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        roles = None if self.role_labels is None else self.role_labels[idx]
        return Dataset(self.images[idx], self.class_labels[idx], roles)


@dataclass
class ProtocolSplit:
    train: Dataset  # normal samples only
    test: Dataset  # role_labels: 0 normal, 1 abnormal
    normal_class: int

    @property
    def test_normal(self) -> np.ndarray:
        return self.test.images[self.test.role_labels == NORMAL]

    @property
    def test_abnormal(self) -> np.ndarray:
        return self.test.images[self.test.role_labels == ABNORMAL]


# ---------------------------------------------------------------- IDX


def parse_idx(buf: bytes, expect_magic: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX stream into an array of its declared shape."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise ParseError(f"IDX header needs 4 bytes, got {len(buf)}", offset=0)
    zero, dtype_code, ndim = struct.unpack_from(">HBB", buf, 0)
    magic = struct.unpack_from(">I", buf, 0)[0]
    if zero != 0 or dtype_code != IDX_UBYTE or ndim == 0:
        raise ParseError(f"bad IDX magic 0x{magic:08x}", offset=0)
    if expect_magic is not None and magic != expect_magic:
        raise ParseError(f"IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"IDX header declares {ndim} dims; need {header} bytes, got {len(buf)}",
                         offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    expected = header + math.prod(dims)
    if len(buf) < expected:
        raise ParseError(f"truncated IDX payload: expected {expected} bytes, got {len(buf)}", offset=len(buf))
    if len(buf) > expected:
        raise ParseError(f"{len(buf) - expected} trailing bytes after IDX payload", offset=expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    head = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _read_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"no file {stem}[.gz] in {directory}")


def idx_dataset(images: bytes, labels: bytes) -> Dataset:
    imgs = parse_idx(images, IDX_IMAGE_MAGIC)
    labs = parse_idx(labels, IDX_LABEL_MAGIC)
    if len(imgs) != len(labs):
        raise DataError(f"{len(imgs)} images but {len(labs)} labels")
    return Dataset((imgs.astype(np.float32) / np.float32(255))[..., None], labs)


def load_idx_pair(directory: str | Path) -> tuple[Dataset, Dataset]:
    """Load the standard ``train-*`` / ``t10k-*`` files (MNIST and Fashion-MNIST share names)."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    out = []
    for prefix in ("train", "t10k"):
        out.append(idx_dataset(_read_maybe_gz(_find(d, f"{prefix}-images-idx3-ubyte")),
                               _read_maybe_gz(_find(d, f"{prefix}-labels-idx1-ubyte"))))
    return out[0], out[1]


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar10_bin(buf: bytes) -> Dataset:
    """Decode concatenated 3073-byte CIFAR-10 records (label + planar RGB)."""
    buf = bytes(buf)
    if len(buf) % CIFAR_RECORD:
        raise ParseError(f"length {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record size",
                         offset=len(buf) - len(buf) % CIFAR_RECORD)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"label {labels[bad]} out of range 0..9", offset=bad * CIFAR_RECORD)
    planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return Dataset(planes.astype(np.float32) / np.float32(255), labels)


def serialize_cifar10_bin(data: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar10_bin`. Grayscale 32x32 images are replicated to RGB."""
    imgs = data.images
    if imgs.shape[1:3] != (CIFAR_SIDE, CIFAR_SIDE) or imgs.shape[3] not in (1, 3):
        raise DataError(f"CIFAR-10 records hold 32x32x3 images, got {imgs.shape[1:]}")
    if imgs.shape[3] == 1:
        imgs = np.repeat(imgs, 3, axis=3)
    pixels = np.rint(np.clip(imgs, 0, 1) * 255).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(imgs), -1)
    labels = data.class_labels.astype(np.uint8)[:, None]
    return np.concatenate([labels, pixels], axis=1).tobytes()


def load_cifar10(directory: str | Path) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    train_files = sorted(d.glob("data_batch_*.bin"))
    if not train_files or not (d / "test_batch.bin").exists():
        raise DataError(f"expected data_batch_*.bin and test_batch.bin in {d}")
    train = parse_cifar10_bin(b"".join(p.read_bytes() for p in train_files))
    test = parse_cifar10_bin((d / "test_batch.bin").read_bytes())
    return train, test


# ---------------------------------------------------------------- protocol


def _balanced_quota(available: Sequence[int], total: int) -> list[int]:
    """Split ``total`` as evenly as possible across groups, capped by what each has."""
    quota = [0] * len(available)
    remaining = total
    open_groups = [i for i, a in enumerate(available) if a > 0]
    while remaining > 0 and open_groups:
        share, extra = divmod(remaining, len(open_groups))
        for k, i in enumerate(open_groups):
            want = share + (1 if k < extra else 0)
            got = min(want, available[i] - quota[i])
            quota[i] += got
            remaining -= got
        open_groups = [i for i in open_groups if quota[i] < available[i]]
    return quota


def make_protocol(train: Dataset, test: Dataset, normal_class: int, test_normal: int = 1000,
                  test_abnormal: int = 9000, seed: int = 0) -> ProtocolSplit:
    """One-vs-rest split: train on every training sample of ``normal_class``; the test
    set draws ``test_normal`` normals and ``test_abnormal`` abnormals without replacement,
    spread evenly over the remaining classes."""
    if not 0 <= normal_class <= 9:
        raise ConfigError(f"normal_class must be in 0..9, got {normal_class}")
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(train.class_labels == normal_class)
    if train_idx.size == 0:
        raise DataError(f"no training samples of class {normal_class}")

    normal_pool = np.flatnonzero(test.class_labels == normal_class)
    if normal_pool.size < test_normal:
        raise DataError(f"requested {test_normal} normal test samples, only {normal_pool.size} available")
    others = [c for c in range(10) if c != normal_class]
    pools = [np.flatnonzero(test.class_labels == c) for c in others]
    available = sum(p.size for p in pools)
    if available < test_abnormal:
        raise DataError(f"requested {test_abnormal} abnormal test samples, only {available} available")

    picked_normal = np.sort(rng.choice(normal_pool, test_normal, replace=False))
    quota = _balanced_quota([p.size for p in pools], test_abnormal)
    picked_abnormal = np.sort(np.concatenate(
        [rng.choice(p, q, replace=False) for p, q in zip(pools, quota)] or [np.empty(0, np.int64)]))

    train_set = train.subset(train_idx)
    train_set.role_labels = np.zeros(len(train_set), np.int64)
    idx = np.concatenate([picked_normal, picked_abnormal])
    roles = np.concatenate([np.zeros(test_normal, np.int64), np.ones(test_abnormal, np.int64)])
    return ProtocolSplit(train_set, Dataset(test.images[idx], test.class_labels[idx], roles), normal_class)


# ---------------------------------------------------------------- synthetic


SYNTHETIC_KINDS = ("blobs_vs_rings",)
NOISE_SIGMA = 0.05


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(ax, ax, indexing="ij")


def _render_blobs(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    scale = size / 28.0
    cy = rng.uniform(0.35, 0.65, n)[:, None, None] * size
    cx = rng.uniform(0.35, 0.65, n)[:, None, None] * size
    s = rng.uniform(3.6, 4.2, n)[:, None, None] * scale
    # axis ratio in (0.15, 1]; beta(1, 3) keeps most blobs round, a tail strongly elongated.
    # major * minor == s**2, so elongation changes shape but not area
    ratio = (1.0 - 0.85 * rng.beta(1.0, 3.0, n))[:, None, None]
    major, minor = s / np.sqrt(ratio), s * np.sqrt(ratio)
    theta = rng.uniform(0, np.pi, n)[:, None, None]
    amp = rng.uniform(0.8, 1.0, n)[:, None, None]
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return amp * np.exp(-0.5 * ((u / major) ** 2 + (v / minor) ** 2))


def _render_rings(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    scale = size / 28.0
    cy = rng.uniform(0.35, 0.65, n)[:, None, None] * size
    cx = rng.uniform(0.35, 0.65, n)[:, None, None] * size
    radius = rng.uniform(5.0, 8.0, n)[:, None, None] * scale
    width = rng.uniform(0.8, 1.2, n)[:, None, None] * scale
    # dimmer than the blobs so that total brightness alone does not separate the classes
    amp = rng.uniform(0.5, 0.75, n)[:, None, None]
    r = np.hypot(yy - cy, xx - cx)
    return amp * np.exp(-0.5 * ((r - radius) / width) ** 2)


def make_synthetic(kind: str = "blobs_vs_rings", n_train: int = 2000, n_test_normal: int = 200,
                   n_test_abnormal: int = 1800, image_size: int = 28, seed: int = 0) -> ProtocolSplit:
    """Normal class: filled Gaussian blobs of varying position, size, orientation and
    eccentricity. Abnormal class: thin, dimmer rings. Additive N(0, 0.05^2) noise,
    clamped to [0, 1]. Class label 0 is normal, 1 abnormal."""
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {image_size}")
    for name, value in (("n_train", n_train), ("n_test_normal", n_test_normal),
                        ("n_test_abnormal", n_test_abnormal)):
        if value < 1:
            raise ConfigError(f"{name} must be >= 1")
    rng = np.random.default_rng(seed)

    def finish(clean: np.ndarray) -> np.ndarray:
        noisy = clean + rng.normal(0.0, NOISE_SIGMA, clean.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)[..., None]

    train = finish(_render_blobs(rng, n_train, image_size))
    test_n = finish(_render_blobs(rng, n_test_normal, image_size))
    test_a = finish(_render_rings(rng, n_test_abnormal, image_size))
    train_set = Dataset(train, np.zeros(n_train), np.zeros(n_train))
    roles = np.concatenate([np.zeros(n_test_normal), np.ones(n_test_abnormal)])
    test_set = Dataset(np.concatenate([test_n, test_a]), roles.copy(), roles)
    return ProtocolSplit(train_set, test_set, normal_class=0)
