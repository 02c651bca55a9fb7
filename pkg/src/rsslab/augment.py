"""Seeded multi-crop / fixed-patch view sampling with resize-to-full semantics.

Crops are drawn per (image, slot) from independent sub-seed streams, so one
slot's draws never disturb another's and sampling is reproducible bit for
bit. Every view records the sparse bilinear map from source pixels to view
pixels; attacks that go end-to-end through view extraction reuse that map
as a constant linear operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ImageBatch
from .errors import InvalidSpec, ShapeMismatch
from .seeding import generator

MODES = ("crop", "patch", "central")


@dataclass(frozen=True)
class StyleJitterLaw:
    """Per-channel affine nuisance: scale ~ U(*scale_range), shift ~ U(*shift_range)."""

    scale_range: tuple[float, float] = (1.0, 1.0)
    shift_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise InvalidSpec(f"scale range {self.scale_range} invalid")
        if self.shift_range[0] > self.shift_range[1]:
            raise InvalidSpec(f"shift range {self.shift_range} invalid")

    @property
    def is_identity(self) -> bool:
        return self.scale_range == (1.0, 1.0) and self.shift_range == (0.0, 0.0)

    def draw(self, rng: np.random.Generator, ch: int) -> tuple[np.ndarray, np.ndarray]:
        scale = (rng.uniform(*self.scale_range, size=ch)
                 if self.scale_range[0] != self.scale_range[1]
                 else np.full(ch, self.scale_range[0]))
        shift = (rng.uniform(*self.shift_range, size=ch)
                 if self.shift_range[0] != self.shift_range[1]
                 else np.full(ch, self.shift_range[0]))
        return scale, shift


@dataclass(frozen=True)
class AugmentSpec:
    """Sampling law for views: area scales, aspect ratios, slot count, output size."""

    mode: str = "crop"
    scales: tuple[float, float] = (0.08, 1.0)
    ratios: tuple[float, float] = (0.75, 1.3)
    crop_count: int = 16
    out_size: tuple[int, int] = (16, 16)
    jitter: StyleJitterLaw | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidSpec(f"unknown mode {self.mode!r}")
        s_lo, s_hi = self.scales
        r_lo, r_hi = self.ratios
        if not (0.0 < s_lo <= s_hi <= 1.0):
            raise InvalidSpec(f"scale bounds {self.scales} invalid")
        if not (0.0 < r_lo <= r_hi):
            raise InvalidSpec(f"ratio bounds {self.ratios} invalid")
        if self.crop_count < 1:
            raise InvalidSpec("crop_count must be >= 1")
        if min(self.out_size) < 1:
            raise InvalidSpec("output size must be positive")

    def effective_count(self) -> int:
        return 1 if self.mode == "central" else self.crop_count


@dataclass
class ViewBatch:
    """One crop slot's views for a whole image batch.

    ``src_index``/``src_weight`` (n, outH*outW, 4) express each view pixel as
    a weighted sum of source-image spatial pixels (channels follow along);
    ``channel_scale`` (n, ch) carries any jitter gain so gradients can be
    pushed back to the source image exactly.
    """

    pixels: np.ndarray
    src_index: np.ndarray
    src_weight: np.ndarray
    rects: np.ndarray  # (n, 4) rows of (top, left, h, w)
    channel_scale: np.ndarray

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    def flat_columns(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.reshape(self.n, -1).T)

    def flat_gather_tables(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        """Expand the spatial map to flattened (spatial-major, channel-minor) pixels."""
        n, op, k = self.src_index.shape
        idx = (self.src_index[:, :, None, :] * channels
               + np.arange(channels)[None, None, :, None])
        wts = np.broadcast_to(self.src_weight[:, :, None, :], idx.shape).copy()
        wts = wts * self.channel_scale[:, None, :, None]
        return idx.reshape(n, op * channels, k), wts.reshape(n, op * channels, k)


def _bilinear_axis(start: int, length: int, out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned source coordinates for one axis: lo index, hi index, hi weight."""
    if out == 1:
        coord = np.array([start + (length - 1) / 2.0])
    else:
        coord = start + np.arange(out) * ((length - 1) / (out - 1))
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, start + length - 1)
    w_hi = coord - lo
    return lo, hi, w_hi


def _crop_tables(top: int, left: int, h: int, w: int,
                 img_h: int, img_w: int, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """(outH*outW, 4) spatial gather indices and weights for one crop."""
    ylo, yhi, wy = _bilinear_axis(top, h, out_h)
    xlo, xhi, wx = _bilinear_axis(left, w, out_w)
    y00 = ylo[:, None] * img_w + xlo[None, :]
    y01 = ylo[:, None] * img_w + xhi[None, :]
    y10 = yhi[:, None] * img_w + xlo[None, :]
    y11 = yhi[:, None] * img_w + xhi[None, :]
    idx = np.stack([y00, y01, y10, y11], axis=-1).reshape(-1, 4)
    a = (1 - wy)[:, None] * (1 - wx)[None, :]
    b = (1 - wy)[:, None] * wx[None, :]
    c = wy[:, None] * (1 - wx)[None, :]
    d = wy[:, None] * wx[None, :]
    wts = np.stack([a, b, c, d], axis=-1).reshape(-1, 4)
    return idx, wts


def _draw_rect(rng: np.random.Generator, spec: AugmentSpec,
               img_h: int, img_w: int) -> tuple[int, int, int, int]:
    """Sample (top, left, h, w); up to 10 attempts, then the full image."""
    area = img_h * img_w
    for _ in range(10):
        target = area * rng.uniform(spec.scales[0], spec.scales[1])
        ratio = np.exp(rng.uniform(np.log(spec.ratios[0]), np.log(spec.ratios[1])))
        w = int(round(np.sqrt(target * ratio)))
        h = int(round(np.sqrt(target / ratio)))
        if 1 <= w <= img_w and 1 <= h <= img_h:
            top = int(rng.integers(0, img_h - h + 1))
            left = int(rng.integers(0, img_w - w + 1))
            return top, left, h, w
    return 0, 0, img_h, img_w


def sample_views(img: ImageBatch, spec: AugmentSpec, seed: int) -> list[ViewBatch]:
    """Draw the spec's views of every image; bit-identical for identical seeds."""
    n = img.n
    img_h, img_w, ch = img.shape
    out_h, out_w = spec.out_size
    out_p = out_h * out_w
    flat = img.pixels.reshape(n, img_h * img_w, ch)
    count = spec.effective_count()
    views: list[ViewBatch] = []
    for slot in range(count):
        idx = np.empty((n, out_p, 4), dtype=np.int64)
        wts = np.empty((n, out_p, 4))
        rects = np.empty((n, 4), dtype=np.int64)
        for j in range(n):
            if spec.mode == "central":
                rect = (0, 0, img_h, img_w)
            else:
                rect = _draw_rect(generator(seed, j, slot), spec, img_h, img_w)
            rects[j] = rect
            idx[j], wts[j] = _crop_tables(*rect, img_h, img_w, out_h, out_w)
        gathered = flat[np.arange(n)[:, None, None], idx]  # (n, out_p, 4, ch)
        pixels = (gathered * wts[:, :, :, None]).sum(axis=2).reshape(n, out_h, out_w, ch)
        scale = np.ones((n, ch))
        if spec.jitter is not None and not spec.jitter.is_identity:
            pixels, scale = _apply_jitter(pixels, spec.jitter, seed, slot)
        views.append(ViewBatch(pixels, idx, wts, rects, scale))
    return views


def _apply_jitter(pixels: np.ndarray, law: StyleJitterLaw,
                  seed: int, slot: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, _, ch = pixels.shape
    scale = np.ones((n, ch))
    shift = np.zeros((n, ch))
    for j in range(n):
        scale[j], shift[j] = law.draw(generator(seed, j, slot, "jitter"), ch)
    out = pixels * scale[:, None, None, :] + shift[:, None, None, :]
    return np.clip(out, 0.0, 1.0), scale


def style_jitter(img: ImageBatch, law: StyleJitterLaw, seed: int) -> ImageBatch:
    """Standalone per-channel affine nuisance on a whole batch; labels pass through."""
    if law.is_identity:
        return ImageBatch(img.pixels.copy(), img.labels)
    out = np.empty_like(img.pixels)
    ch = img.shape[2]
    for j in range(img.n):
        scale, shift = law.draw(generator(seed, j, "jitter"), ch)
        out[j] = np.clip(img.pixels[j] * scale + shift, 0.0, 1.0)
    return ImageBatch(out, img.labels)


def central_spec(like: AugmentSpec) -> AugmentSpec:
    """The central-crop protocol companion of a training spec (no jitter)."""
    return AugmentSpec(mode="central", scales=like.scales, ratios=like.ratios,
                       crop_count=1, out_size=like.out_size, jitter=None)


def eval_spec(like: AugmentSpec, n: int) -> AugmentSpec:
    """Aggregation protocol: same crop law as pretraining, n slots, no jitter."""
    if like.mode == "central" or n == 1:
        return central_spec(like)
    return AugmentSpec(mode=like.mode, scales=like.scales, ratios=like.ratios,
                       crop_count=n, out_size=like.out_size, jitter=None)
