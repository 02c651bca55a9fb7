"""Desk-scale datasets: a seeded content/style generator and IDX file IO.

The generator builds images whose class identity lives in a fixed spatial
luminance pattern (the "content") while per-sample color casts and
low-frequency textures (the "style") vary independently of the label. The
content patterns are orthonormal, so classes are linearly recoverable from
raw pixels by construction; the margin amplitude controls how much l-inf
perturbation the content signal can absorb.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CountMismatch, FormatError, InvalidSpec
from .seeding import generator

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageBatch:
    """Pixel tensor (n, H, W, channels) in [0, 1] with optional labels."""

    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 4:
            raise InvalidSpec(f"pixels must be (n, H, W, ch), got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InvalidSpec("pixels must lie within [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.pixels.shape[0],):
                raise InvalidSpec("label count must match image count")

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape[1:]

    def take(self, idx) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.pixels[idx], labels)

    def flat_columns(self) -> np.ndarray:
        """(H*W*ch, n) matrix, one flattened image per column."""
        return np.ascontiguousarray(self.pixels.reshape(self.n, -1).T)


@dataclass(frozen=True)
class ContentStyleSpec:
    """Law for the synthetic dataset.

    content_margin is the coefficient on the orthonormal class pattern;
    style_color / style_texture / pixel_noise are label-independent
    nuisance amplitudes.
    """

    num_classes: int = 4
    per_class: int = 300
    height: int = 16
    width: int = 16
    channels: int = 3
    content_margin: float = 3.0
    style_color: float = 0.12
    style_texture: float = 0.08
    pixel_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.per_class < 1:
            raise InvalidSpec("need at least 2 classes and 1 sample per class")
        if self.content_margin <= 0:
            raise InvalidSpec("content margin must be positive for separability")
        if min(self.height, self.width, self.channels) < 1:
            raise InvalidSpec("degenerate image shape")


def _smooth_field(rng: np.random.Generator, h: int, w: int, cutoff: int = 4) -> np.ndarray:
    """Low-frequency random field from a few cosine modes, roughly unit scale."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    field = np.zeros((h, w))
    for _ in range(cutoff):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        field += rng.normal() * np.cos(2 * np.pi * fy * yy / h + py) * np.cos(
            2 * np.pi * fx * xx / w + px)
    field -= field.mean()
    norm = np.linalg.norm(field)
    return field / norm if norm > 0 else field


def class_patterns(spec: ContentStyleSpec) -> np.ndarray:
    """Orthonormal spatial patterns, one (H, W) slice per class."""
    rng = generator(spec.seed, "content-patterns")
    h, w = spec.height, spec.width
    raw = np.stack([_smooth_field(rng, h, w).ravel() for _ in range(spec.num_classes)])
    # Gram-Schmidt over flattened luminance space
    basis = []
    for v in raw:
        for u in basis:
            v = v - (v @ u) * u
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise InvalidSpec("content patterns degenerate; change the seed")
        basis.append(v / n)
    return np.stack(basis).reshape(spec.num_classes, h, w)


def generate(spec: ContentStyleSpec) -> ImageBatch:
    """Balanced labeled batch, deterministic in the spec (including its seed)."""
    patterns = class_patterns(spec)
    h, w, ch = spec.height, spec.width, spec.channels
    n = spec.num_classes * spec.per_class
    pixels = np.empty((n, h, w, ch))
    labels = np.empty(n, dtype=np.int64)
    per_pixel = spec.content_margin / np.sqrt(h * w)
    if per_pixel > 0.35:
        raise InvalidSpec("content margin too large; pattern would clip away")
    i = 0
    for k in range(spec.num_classes):
        for s in range(spec.per_class):
            rng = generator(spec.seed, "sample", k, s)
            img = np.full((h, w, ch), 0.5)
            img += (spec.content_margin * patterns[k])[:, :, None]
            if spec.style_texture > 0:
                tex = _smooth_field(rng, h, w) * np.sqrt(h * w)
                img += spec.style_texture * tex[:, :, None]
            if spec.style_color > 0:
                img += rng.uniform(-spec.style_color, spec.style_color, size=ch)
            if spec.pixel_noise > 0:
                img += rng.normal(0.0, spec.pixel_noise, size=(h, w, ch))
            pixels[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    return ImageBatch(pixels, labels)


def split(batch: ImageBatch, train_per_class: int, seed: int) -> tuple[ImageBatch, ImageBatch]:
    """Disjoint, exhaustive, class-balanced train/test split; pure in (batch, seed)."""
    if batch.labels is None:
        raise InvalidSpec("split needs labels")
    train_idx, test_idx = [], []
    for k in np.unique(batch.labels):
        members = np.flatnonzero(batch.labels == k)
        if len(members) <= train_per_class:
            raise InvalidSpec(
                f"class {k} has {len(members)} samples, cannot reserve a test set")
        perm = generator(seed, "split", int(k)).permutation(len(members))
        members = members[perm]
        train_idx.extend(members[:train_per_class])
        test_idx.extend(members[train_per_class:])
    return batch.take(np.sort(train_idx)), batch.take(np.sort(test_idx))


def load_idx(images_path: str | Path, labels_path: str | Path) -> ImageBatch:
    """Read big-endian IDX image/label files; pixels are scaled by 1/255."""
    img_bytes = Path(images_path).read_bytes()
    lab_bytes = Path(labels_path).read_bytes()
    if len(img_bytes) < 16:
        raise FormatError("image file too short for IDX header")
    magic, n, h, w = struct.unpack(">IIII", img_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}")
    expected = 16 + n * h * w
    if len(img_bytes) != expected:
        raise FormatError(f"image payload is {len(img_bytes)} bytes, expected {expected}")
    if len(lab_bytes) < 8:
        raise FormatError("label file too short for IDX header")
    lmagic, ln = struct.unpack(">II", lab_bytes[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x}")
    if len(lab_bytes) != 8 + ln:
        raise FormatError("label payload length mismatch")
    if n != ln:
        raise CountMismatch(f"{n} images but {ln} labels")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, offset=16).astype(np.float64)
    pixels = (pixels / 255.0).reshape(n, h, w, 1)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return ImageBatch(pixels, labels)


def save_idx(batch: ImageBatch, images_path: str | Path, labels_path: str | Path):
    """Write a single-channel batch as IDX (inverse of load_idx)."""
    if batch.labels is None:
        raise InvalidSpec("IDX export needs labels")
    if batch.shape[2] != 1:
        raise InvalidSpec("IDX export supports single-channel images only")
    n, h, w, _ = batch.pixels.shape
    data = np.round(batch.pixels[:, :, :, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(data.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(batch.labels.astype(np.uint8).tobytes())
