"""Datasets: a seeded procedural image generator, IDX files, and batching."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from ._io import atomic_write_bytes
from .errors import DataError, IdxDimensionError, IdxMagicError, IdxTruncatedError

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split, dict(self.provenance))


# ---------------------------------------------------------------------------
# synthetic textures

def _class_prototypes(rng, num_classes, channels):
    protos = []
    base = rng.uniform(0, np.pi)
    for c in range(num_classes):
        protos.append({
            "angle": base + np.pi * c / num_classes,
            "freq": rng.uniform(1.5, 3.5),
            "color": rng.uniform(0.3, 1.0, size=channels) * rng.choice([-1.0, 1.0], size=channels),
            "blobs": rng.uniform(0.2, 0.8, size=(int(rng.integers(1, 4)), 2)),
            "blob_sign": rng.choice([-1.0, 1.0]),
        })
    return protos


def _render(proto, rng, size, difficulty):
    c, h, w = size
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    d = difficulty
    angle = proto["angle"] + rng.normal(0.0, 0.5) * d
    phase = rng.uniform(-np.pi, np.pi) * min(1.0, 3.0 * d)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    grating = np.sin(2 * np.pi * proto["freq"] * proj + phase)
    blobs = np.zeros((h, w))
    for cy, cx in proto["blobs"]:
        cy = cy + rng.normal(0.0, 0.25) * d
        cx = cx + rng.normal(0.0, 0.25) * d
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.1 ** 2))
    contrast = 1.0 + rng.uniform(-0.3, 0.3) * d
    img = 0.5 + contrast * (0.22 * proto["color"][:, None, None] * grating
                            + 0.25 * proto["blob_sign"] * blobs[None])
    img = img + rng.normal(0.0, 0.6 * d, size=(c, h, w))
    return img


def _quantize(images):
    # multiples of 1/255 so IDX export round-trips exactly
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def synth_generate(num_classes: int, n_per_class: int, size=(3, 32, 32), difficulty: float = 0.3,
                   seed: int = 0, test_per_class: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Class-conditional oriented gratings plus blob layouts, with noise set by ``difficulty``.

    Class prototypes, the train split and the test split come from three
    independent streams of the same seed. ``test_per_class`` defaults to a
    fifth of ``n_per_class`` (at least one).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    size = tuple(int(s) for s in size)
    if test_per_class is None:
        test_per_class = max(1, n_per_class // 5)
    ss = np.random.SeedSequence(seed)
    proto_seq, train_seq, test_seq = ss.spawn(3)
    protos = _class_prototypes(np.random.default_rng(proto_seq), num_classes, size[0])
    prov = {"kind": "synthetic", "seed": seed, "num_classes": num_classes, "n_per_class": n_per_class,
            "test_per_class": test_per_class, "size": list(size), "difficulty": difficulty}

    def split(seq, per_class, tag):
        rng = np.random.default_rng(seq)
        labels = np.repeat(np.arange(num_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = np.stack([_render(protos[l], rng, size, difficulty) for l in labels]) if len(labels) else \
            np.zeros((0,) + size)
        return Dataset(_quantize(images), labels.astype(np.int64), num_classes, tag, dict(prov))

    return split(train_seq, n_per_class, "train"), split(test_seq, test_per_class, "test")


# ---------------------------------------------------------------------------
# IDX

def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise IdxMagicError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    body = len(raw) - header
    if body < n:
        raise IdxTruncatedError(f"{path}: {body} data bytes, dims {list(dims)} need {n}")
    if body > n:
        raise IdxDimensionError(f"{path}: {body - n} trailing bytes beyond dims {list(dims)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"IDX export expects uint8 data, got {array.dtype}")
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    atomic_write_bytes(path, header + np.ascontiguousarray(array).tobytes())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_idx(image_path, label_path, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixel bytes are scaled by 1/255.

    Images may be [N, H, W] (magic 0x803, one channel) or [N, C, H, W]
    (0x804, as written by :func:`export_idx` for colour data).
    """
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if labels.ndim != 1:
        raise IdxMagicError(f"{label_path}: label file must be 1-d (magic 0x{LABELS_MAGIC:08x})")
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise IdxMagicError(f"{image_path}: image file must be 3-d (magic 0x{IMAGES_MAGIC:08x}) or 4-d")
    if len(images) != len(labels):
        raise IdxDimensionError(f"{len(images)} images in {image_path} but {len(labels)} labels in {label_path}")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    prov = {"kind": "idx", "images": str(image_path), "labels": str(label_path),
            "checksums": {"images": _sha256(image_path), "labels": _sha256(label_path)}}
    return Dataset(images.astype(np.float64) / 255.0, labels, num_classes, split, prov)


def export_idx(dataset: Dataset, image_path, label_path) -> None:
    imgs = np.round(dataset.images * 255.0).astype(np.uint8)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    write_idx(image_path, imgs)
    write_idx(label_path, dataset.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# batching

def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches; each epoch is a fresh permutation, remainder dropped."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}], got {batch_size}")
    per_epoch = n // batch_size
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * batch_size:(b + 1) * batch_size]


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for idx in batch_indices(len(dataset), batch_size, rng):
        yield dataset.images[idx], dataset.labels[idx]
