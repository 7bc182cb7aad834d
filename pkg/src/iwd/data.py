"""Datasets: seeded synthetic stripe textures, IDX files, the checkerboard fixture."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GeometryError, PathError, ValidationError

IMAGE_MAGIC = 0x00000803
IMAGE_MAGIC_RGB = 0x00000804
LABEL_MAGIC = 0x00000801
SPLIT_KEYS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    images: np.ndarray          # (n, H, W, C) float64 in [0, 1]
    labels: np.ndarray          # (n,) int64
    n_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (n, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValidationError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError("labels out of range for the class count")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.split, dict(self.provenance))

    def flat(self):
        return self.images.reshape(len(self), -1)


def stripe_template(k, n_classes, H, W, contrast=0.5):
    """Noise-free texture of class k: a cosine grating whose orientation and
    period depend on the class."""
    n_orient = min(n_classes, 4)
    theta = np.pi * (k % n_orient) / n_orient
    period = (6.0, 4.0, 3.0)[(k // n_orient) % 3]
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    phase = 2 * np.pi * (rr * np.sin(theta) + cc * np.cos(theta)) / period
    return 0.5 + 0.5 * contrast * np.cos(phase)


def generate_synthetic(seed, n_classes=4, per_class=100, size=(12, 12), channels=1,
                       noise=0.05, contrast=0.5, split="train"):
    """Seeded texture dataset. Pixels are quantized to multiples of 1/255 so
    that IDX round trips are exact."""
    H, W = size
    if n_classes < 2:
        raise ValidationError("need at least 2 classes")
    if H % 3 or W % 3 or H < 3 or W < 3:
        raise ValidationError(f"image size must be a positive multiple of 3, got {H}x{W}")
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    if split not in SPLIT_KEYS:
        raise ValidationError(f"unknown split {split!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLIT_KEYS[split]]))
    images = []
    labels = []
    for k in range(n_classes):
        t = np.repeat(stripe_template(k, n_classes, H, W, contrast)[:, :, None], channels, axis=2)
        x = t[None] + noise * rng.standard_normal((per_class, H, W, channels))
        images.append(x)
        labels.append(np.full(per_class, k))
    images = np.clip(np.concatenate(images), 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    prov = {"kind": "synthetic", "seed": seed, "n_classes": n_classes, "per_class": per_class,
            "size": [H, W], "channels": channels, "noise": noise, "contrast": contrast, "split": split}
    return Dataset(images[order], labels[order], n_classes, split, prov)


def checkerboard_image(H, W, k):
    """Alternating 0/1 tiles of size k (top-left tile is 0)."""
    if k < 1 or H % k or W % k:
        raise GeometryError(f"tile size {k} does not divide {H}x{W}")
    r = np.arange(H)[:, None] // k
    c = np.arange(W)[None, :] // k
    return ((r + c) % 2).astype(np.float64)[:, :, None]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read(path):
    if not os.path.exists(path):
        raise PathError(f"no such file: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, n_classes=None, split="train"):
    raw = _read(images_path)
    if len(raw) < 4:
        raise FormatError("truncated image header", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in (IMAGE_MAGIC, IMAGE_MAGIC_RGB):
        raise FormatError(f"bad image magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("truncated image header", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    n, H, W = dims[:3]
    C = dims[3] if ndim == 4 else 1
    need = n * H * W * C
    if len(raw) - head < need:
        raise FormatError(f"image data truncated: need {need} bytes", offset=len(raw))
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(n, H, W, C)

    lab = _read(labels_path)
    if len(lab) < 8:
        raise FormatError("truncated label header", offset=len(lab))
    (lmagic, ln) = struct.unpack_from(">II", lab, 0)
    if lmagic != LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x}", offset=0)
    if ln != n:
        raise FormatError(f"label count {ln} does not match image count {n}", offset=4)
    if len(lab) - 8 < ln:
        raise FormatError(f"label data truncated: need {ln} bytes", offset=len(lab))
    labels = np.frombuffer(lab, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    prov = {"kind": "idx", "images": str(images_path), "labels": str(labels_path), "split": split}
    return Dataset(pix.astype(np.float64) / 255.0, labels, max(k, 2), split, prov)


def save_idx(ds, images_path, labels_path):
    n, H, W, C = ds.images.shape
    pix = np.rint(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        if C == 1:
            fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, H, W))
        else:
            fh.write(struct.pack(">IIIII", IMAGE_MAGIC_RGB, n, H, W, C))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())
