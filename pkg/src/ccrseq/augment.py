"""Seeded weak/strong image augmentation for grayscale text crops.

WeakAug is color jitter only. StrongAug is a RandAugment-style policy: ``n``
ops drawn with replacement from a fixed pool, each at a random level no
larger than the integer magnitude (0..10 scale). Region-erasing ops (Cutout and
friends) are deliberately absent from the pool because they can delete
characters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .datagen import ImageSample

POOL_VERSION = "strong-pool/1"
MAX_LEVEL = 10


class AugmentKind(str, enum.Enum):
    WEAK = "WEAK"
    STRONG = "STRONG"
    NONE = "NONE"


@dataclass(frozen=True)
class AugmentPolicy:
    kind: AugmentKind = AugmentKind.STRONG
    n: int = 2
    magnitude: int = 10
    brightness: float = 0.2
    contrast: float = 0.2

    def __post_init__(self):
        if not 0 <= self.magnitude <= MAX_LEVEL:
            raise ValueError(f"magnitude must be in 0..{MAX_LEVEL}")
        if self.n < 0:
            raise ValueError("n must be non-negative")


def _check(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale grid, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return pixels


# ---------------------------------------------------------------------------
# weak


def color_jitter(pixels: np.ndarray, brightness_shift: float = 0.0, contrast_scale: float = 1.0) -> np.ndarray:
    """Contrast about the image mean, then an additive brightness shift.

    Saturation and hue are identities on a single channel, so they are not
    represented here.
    """
    x = pixels
    if contrast_scale != 1.0:
        mean = x.mean()
        x = (x - mean) * contrast_scale + mean
    if brightness_shift != 0.0:
        x = x + brightness_shift
    if x is pixels:
        return pixels.copy()
    return np.clip(x, 0.0, 1.0).astype(pixels.dtype)


def weak_params(seed: int, brightness: float = 0.2, contrast: float = 0.2) -> tuple[float, float]:
    rng = np.random.default_rng([seed, 0xEA])
    b = float(rng.uniform(-brightness, brightness)) if brightness > 0 else 0.0
    c = float(rng.uniform(1.0 - contrast, 1.0 + contrast)) if contrast > 0 else 1.0
    return b, c


def weak_pixels(pixels: np.ndarray, seed: int, brightness: float = 0.2, contrast: float = 0.2) -> np.ndarray:
    b, c = weak_params(seed, brightness, contrast)
    return color_jitter(_check(pixels), b, c)


def weak_augment(img: ImageSample, seed: int, brightness: float = 0.2, contrast: float = 0.2) -> ImageSample:
    return img.with_pixels(weak_pixels(img.pixels, seed, brightness, contrast))


# ---------------------------------------------------------------------------
# strong op pool; each op maps (pixels, level in [0, 1], sign) -> pixels


def _affine(x: np.ndarray, matrix: np.ndarray, offset) -> np.ndarray:
    return ndimage.affine_transform(x, matrix, offset=offset, order=1, mode="nearest")


def _centered(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    c = (np.array(x.shape, dtype=np.float64) - 1) / 2
    return _affine(x, matrix, c - matrix @ c)


def op_rotate(x, level, sign):
    if level == 0:
        return x
    a = np.deg2rad(15.0 * level * sign)
    # matrix acts on (row, col); aspect ratio is kept by rotating in pixel space
    m = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return _centered(x, m)


def op_shear_x(x, level, sign):
    if level == 0:
        return x
    return _centered(x, np.array([[1.0, 0.0], [0.3 * level * sign, 1.0]]))


def op_shear_y(x, level, sign):
    if level == 0:
        return x
    return _centered(x, np.array([[1.0, 0.1 * level * sign], [0.0, 1.0]]))


def op_translate_x(x, level, sign):
    if level == 0:
        return x
    return ndimage.shift(x, (0.0, 0.1 * x.shape[1] * level * sign), order=1, mode="nearest")


def op_translate_y(x, level, sign):
    if level == 0:
        return x
    return ndimage.shift(x, (0.2 * x.shape[0] * level * sign, 0.0), order=1, mode="nearest")


def op_contrast(x, level, sign):
    if level == 0:
        return x
    factor = 1.0 + 0.9 * level * sign
    mean = x.mean()
    return mean + factor * (x - mean)


def op_brightness(x, level, sign):
    if level == 0:
        return x
    return x * (1.0 + 0.9 * level * sign)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def op_sharpness(x, level, sign):
    if level == 0:
        return x
    blurred = ndimage.convolve(x, _SMOOTH, mode="nearest")
    factor = 1.0 + 0.9 * level * sign
    return blurred + factor * (x - blurred)


def op_posterize(x, level, sign):
    bits = 8 - int(round(4 * level))
    if bits >= 8:
        return x
    q = np.rint(x * 255.0).astype(np.uint8) & np.uint8((0xFF << (8 - bits)) & 0xFF)
    return q.astype(np.float64) / 255.0


def op_solarize(x, level, sign):
    threshold = 1.0 - level
    if threshold >= 1.0:
        return x
    return np.where(x > threshold, 1.0 - x, x)


def op_autocontrast(x, level, sign):
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return x
    return (x - lo) / (hi - lo)


def op_equalize(x, level, sign):
    q = np.rint(x * 255.0).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    cdf = hist.cumsum()
    nonzero = cdf[hist > 0]
    if nonzero.size < 2:
        return x
    cdf_min = nonzero[0]
    lut = (cdf - cdf_min) / max(cdf[-1] - cdf_min, 1)
    return np.clip(lut[q], 0.0, 1.0)


StrongOp = Callable[[np.ndarray, float, float], np.ndarray]

STRONG_OPS: dict[str, StrongOp] = {
    "rotate": op_rotate,
    "shear_x": op_shear_x,
    "shear_y": op_shear_y,
    "translate_x": op_translate_x,
    "translate_y": op_translate_y,
    "contrast": op_contrast,
    "brightness": op_brightness,
    "sharpness": op_sharpness,
    "posterize": op_posterize,
    "solarize": op_solarize,
    "autocontrast": op_autocontrast,
    "equalize": op_equalize,
}

# ops that are the identity at magnitude 0
IDENTITY_AT_ZERO = tuple(k for k in STRONG_OPS if k not in ("autocontrast", "equalize"))


def strong_plan(seed: int, n: int = 2, ops: Optional[Sequence[str]] = None) -> list[tuple[str, float, float]]:
    """The ``(op name, sign, strength)`` sequence StrongAug draws for ``seed``.

    ``strength`` is uniform in [0, 1] and scales the policy magnitude, so the
    magnitude acts as an upper bound on each op's level.
    """
    pool = list(ops) if ops is not None else list(STRONG_OPS)
    rng = np.random.default_rng([seed, 0x5A])
    names = [pool[i] for i in rng.integers(0, len(pool), size=n)]
    signs = rng.choice([-1.0, 1.0], size=n)
    strengths = rng.uniform(0.0, 1.0, size=n)
    return list(zip(names, signs.tolist(), strengths.tolist()))


def strong_pixels(pixels: np.ndarray, seed: int, n: int = 2, magnitude: int = 10,
                  ops: Optional[Sequence[str]] = None) -> np.ndarray:
    _check(pixels)
    if not 0 <= magnitude <= MAX_LEVEL:
        raise ValueError(f"magnitude must be in 0..{MAX_LEVEL}")
    x = pixels.astype(np.float64)
    for name, sign, strength in strong_plan(seed, n, ops):
        level = strength * magnitude / MAX_LEVEL
        x = np.clip(STRONG_OPS[name](x, level, sign), 0.0, 1.0)
    return x.astype(pixels.dtype)


def strong_augment(img: ImageSample, seed: int, n: int = 2, magnitude: int = 10,
                   ops: Optional[Sequence[str]] = None) -> ImageSample:
    return img.with_pixels(strong_pixels(img.pixels, seed, n, magnitude, ops))


def apply_policy(pixels: np.ndarray, seed: int, policy: AugmentPolicy) -> np.ndarray:
    if policy.kind is AugmentKind.NONE:
        return _check(pixels).copy()
    if policy.kind is AugmentKind.WEAK:
        return weak_pixels(pixels, seed, policy.brightness, policy.contrast)
    return strong_pixels(pixels, seed, policy.n, policy.magnitude)


class Augmenter:
    """Batch front-end over the per-image policies.

    Every call names its purpose (e.g. ``"labeled"``, ``"target"``), and the
    optional ``audit`` list records ``(purpose, kind, count)`` so tests can
    check which view went where.
    """

    def __init__(self, weak: AugmentPolicy, strong: AugmentPolicy, audit: Optional[list] = None):
        self.policies = {AugmentKind.WEAK: weak, AugmentKind.STRONG: strong,
                         AugmentKind.NONE: AugmentPolicy(kind=AugmentKind.NONE)}
        self.audit = audit

    def __call__(self, images: np.ndarray, seeds: Sequence[int], kind: AugmentKind, purpose: str) -> np.ndarray:
        """``images`` is (N, H, W) uint8 or float; returns float32 in [0, 1]."""
        kind = AugmentKind(kind)
        if self.audit is not None:
            self.audit.append((purpose, kind, len(seeds)))
        x = images.astype(np.float32)
        if images.dtype == np.uint8:
            x /= np.float32(255.0)
        policy = self.policies[kind]
        if kind is AugmentKind.NONE:
            return x
        return np.stack([apply_policy(img, int(s), policy) for img, s in zip(x, seeds)]) if len(x) else x
