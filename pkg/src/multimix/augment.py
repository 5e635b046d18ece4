"""Weak (flip + pad-and-crop) and strong (random pool composition) augmentation.

Images are 2-D float arrays in [0, 1]. Geometric transforms use inverse
mapping with nearest-neighbour sampling and zero fill.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POOL = (
    "hflip", "crop32", "autocontrast", "brightness", "contrast", "equalize", "identity", "posterize",
    "rotate", "sharpness", "shearX", "shearY", "solarize", "translateX", "translateY",
)

# Continuous magnitude ranges; posterize draws integer bits, crop32 draws offsets, the rest take none.
RANGES = {
    "brightness": (0.5, 1.5),
    "contrast": (0.5, 1.5),
    "sharpness": (0.5, 1.5),
    "posterize": (4, 8),
    "solarize": (0.5, 1.0),
    "shearX": (-0.3, 0.3),
    "shearY": (-0.3, 0.3),
    "rotate": (-30.0, 30.0),
    "translateX": (-0.3, 0.3),
    "translateY": (-0.3, 0.3),
}
PARAMETERLESS = ("hflip", "autocontrast", "equalize", "identity")
MAX_STRONG_OPS = 4
CROP_PAD_AT_256 = 32


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    magnitude: float | tuple[int, int] | None = None

    def validate(self) -> None:
        if self.kind not in POOL:
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind in RANGES:
            lo, hi = RANGES[self.kind]
            if self.magnitude is None or not lo <= self.magnitude <= hi:
                raise ValueError(f"{self.kind}: magnitude {self.magnitude} outside [{lo}, {hi}]")


@dataclass
class AugmentedPair:
    x_w: np.ndarray
    x_g: np.ndarray
    applied: list[TransformSpec] = field(default_factory=list)


def crop_pad(size: int) -> int:
    return max(1, round(CROP_PAD_AT_256 * size / 256))


def pad_crop(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Zero-pad by ``crop_pad`` and cut an S x S window at offset (dy, dx) from the centre."""
    p = crop_pad(x.shape[0])
    if abs(dy) > p or abs(dx) > p:
        raise ValueError(f"crop offset ({dy}, {dx}) exceeds padding {p}")
    h, w = x.shape
    padded = np.pad(x, p)
    return padded[p + dy : p + dy + h, p + dx : p + dx + w].copy()


def _affine(x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Sample ``x`` at ``inv @ (col, row)`` around the image centre."""
    h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    u = cols - cx
    v = rows - cy
    src_c = inv[0, 0] * u + inv[0, 1] * v + cx
    src_r = inv[1, 0] * u + inv[1, 1] * v + cy
    ri = np.floor(src_r + 0.5).astype(np.int64)
    ci = np.floor(src_c + 0.5).astype(np.int64)
    ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = np.zeros_like(x)
    out[ok] = x[ri[ok], ci[ok]]
    return out


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = x.shape
    out = np.zeros_like(x)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if abs(dy) < h and abs(dx) < w:
        out[yd, xd] = x[ys, xs]
    return out


def _blend(x: np.ndarray, base: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return x.copy()
    return base + factor * (x - base)


def _smooth(x: np.ndarray) -> np.ndarray:
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    h, w = x.shape
    padded = np.pad(x.astype(np.float64), 1, mode="edge")
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            out += kernel[i, j] * padded[i : i + h, j : j + w]
    # border pixels are left unsmoothed
    res = x.astype(np.float64).copy()
    res[1:-1, 1:-1] = out[1:-1, 1:-1]
    return res


def equalize(x: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization of the 8-bit quantized image."""
    q = np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    step = (hist.sum() - nonzero[-1]) // 255
    if step == 0:
        return q.astype(x.dtype) / 255.0
    lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
    lut = np.clip(lut, 0, 255)
    return lut[q].astype(x.dtype) / 255.0


def autocontrast(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return x.copy()
    return (x - lo) / (hi - lo)


def posterize(x: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** int(bits) - 1
    return np.floor(x * levels) / levels


def apply_transform(x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    spec.validate()
    k, mag = spec.kind, spec.magnitude
    h, w = x.shape
    if k == "identity":
        out = x.copy()
    elif k == "hflip":
        out = x[:, ::-1].copy()
    elif k == "crop32":
        dy, dx = (0, 0) if mag is None else mag
        out = pad_crop(x, int(dy), int(dx))
    elif k == "autocontrast":
        out = autocontrast(x)
    elif k == "equalize":
        out = equalize(x)
    elif k == "brightness":
        out = _blend(x, np.zeros_like(x), mag)
    elif k == "contrast":
        out = _blend(x, np.full_like(x, x.mean()), mag)
    elif k == "sharpness":
        out = _blend(x, _smooth(x), mag)
    elif k == "posterize":
        out = posterize(x, int(mag))
    elif k == "solarize":
        out = np.where(x > mag, 1.0 - x, x)
    elif k == "rotate":
        t = np.deg2rad(mag)
        # inverse of a counter-clockwise rotation by t
        inv = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
        out = _affine(x, inv)
    elif k == "shearX":
        out = _affine(x, np.array([[1.0, -mag], [0.0, 1.0]]))
    elif k == "shearY":
        out = _affine(x, np.array([[1.0, 0.0], [-mag, 1.0]]))
    elif k == "translateX":
        out = _shift(x, 0, int(round(mag * w)))
    elif k == "translateY":
        out = _shift(x, int(round(mag * h)), 0)
    else:  # pragma: no cover - validate() rejects unknown kinds
        raise ValueError(k)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def sample_spec(kind: str, size: int, rng: np.random.Generator) -> TransformSpec:
    if kind == "posterize":
        lo, hi = RANGES[kind]
        return TransformSpec(kind, int(rng.integers(lo, hi + 1)))
    if kind == "crop32":
        p = crop_pad(size)
        return TransformSpec(kind, (int(rng.integers(-p, p + 1)), int(rng.integers(-p, p + 1))))
    if kind in RANGES:
        lo, hi = RANGES[kind]
        return TransformSpec(kind, float(rng.uniform(lo, hi)))
    return TransformSpec(kind)


def weak_augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5), then pad-and-crop translation jitter."""
    out = x[:, ::-1] if rng.random() < 0.5 else x
    p = crop_pad(x.shape[0])
    dy, dx = rng.integers(-p, p + 1, size=2)
    return pad_crop(np.ascontiguousarray(out), int(dy), int(dx))


def strong_augment(x: np.ndarray, rng: np.random.Generator, pool=POOL) -> tuple[np.ndarray, list[TransformSpec]]:
    """Apply 1-4 distinct transforms drawn from ``pool`` in random order."""
    k = int(rng.integers(1, MAX_STRONG_OPS + 1))
    k = min(k, len(pool))
    kinds = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    applied = [sample_spec(kind, x.shape[0], rng) for kind in kinds]
    out = x
    for spec in applied:
        out = apply_transform(out, spec)
    return np.clip(out, 0.0, 1.0).astype(x.dtype), applied


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Per-sample generator keyed by (seed, step, stream, index); independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def augment_pair(x: np.ndarray, rng: np.random.Generator) -> AugmentedPair:
    x_w = weak_augment(x, rng)
    x_g, applied = strong_augment(x, rng)
    return AugmentedPair(x_w=x_w, x_g=x_g, applied=applied)
