"""Natural image corruptions with 5-level severity presets.

Eight operators in four groups: noise (gaussian, shot, impulse), blur
(defocus, zoom), and digital (pixelate, elastic, contrast). All operate on
[0, 1] float images and are deterministic given an explicit generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import convolve as nd_convolve
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import PresetError
from .imagecore import resize

__all__ = [
    "CorruptionKind",
    "SeverityPreset",
    "CORRUPTION_PRESETS",
    "preset_for",
    "apply_corruption",
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "zoom_blur",
    "pixelate",
    "elastic_transform",
    "contrast",
]


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    ZOOM_BLUR = "zoom_blur"
    PIXELATE = "pixelate"
    ELASTIC_TRANSFORM = "elastic_transform"
    CONTRAST = "contrast"


@dataclass(frozen=True)
class SeverityPreset:
    """A corruption kind plus the exact parameters for one severity level."""

    kind: CorruptionKind
    level: int
    params: dict


CORRUPTION_PRESETS: dict[CorruptionKind, tuple[dict, ...]] = {
    CorruptionKind.GAUSSIAN_NOISE: tuple(
        {"sigma": s} for s in (0.08, 0.12, 0.18, 0.26, 0.38)
    ),
    CorruptionKind.SHOT_NOISE: tuple(
        {"scale": c} for c in (60.0, 25.0, 12.0, 5.0, 3.0)
    ),
    CorruptionKind.IMPULSE_NOISE: tuple(
        {"prob": p} for p in (0.03, 0.06, 0.09, 0.17, 0.27)
    ),
    CorruptionKind.DEFOCUS_BLUR: (
        {"radius": 3.0, "alias_blur": 0.1},
        {"radius": 4.0, "alias_blur": 0.5},
        {"radius": 6.0, "alias_blur": 0.5},
        {"radius": 8.0, "alias_blur": 0.5},
        {"radius": 10.0, "alias_blur": 0.5},
    ),
    CorruptionKind.ZOOM_BLUR: (
        {"zoom_start": 1.0, "zoom_stop": 1.10, "zoom_step": 0.01},
        {"zoom_start": 1.0, "zoom_stop": 1.15, "zoom_step": 0.01},
        {"zoom_start": 1.0, "zoom_stop": 1.21, "zoom_step": 0.02},
        {"zoom_start": 1.0, "zoom_stop": 1.26, "zoom_step": 0.02},
        {"zoom_start": 1.0, "zoom_stop": 1.33, "zoom_step": 0.03},
    ),
    CorruptionKind.PIXELATE: tuple(
        {"ratio": r} for r in (0.6, 0.5, 0.4, 0.3, 0.25)
    ),
    CorruptionKind.ELASTIC_TRANSFORM: (
        {"alpha": 224 * 2.0, "sigma": 224 * 0.7, "alpha_affine": 224 * 0.1},
        {"alpha": 224 * 2.0, "sigma": 224 * 0.08, "alpha_affine": 224 * 0.2},
        {"alpha": 224 * 0.05, "sigma": 224 * 0.01, "alpha_affine": 224 * 0.02},
        {"alpha": 224 * 0.07, "sigma": 224 * 0.01, "alpha_affine": 224 * 0.02},
        {"alpha": 224 * 0.12, "sigma": 224 * 0.01, "alpha_affine": 224 * 0.02},
    ),
    CorruptionKind.CONTRAST: tuple(
        {"factor": c} for c in (0.4, 0.3, 0.2, 0.1, 0.05)
    ),
}


def preset_for(kind, level: int) -> SeverityPreset:
    """Resolve (kind, severity level 1..5) to its exact parameter set."""
    try:
        kind = CorruptionKind(kind)
    except ValueError:
        raise PresetError(f"unknown corruption kind {kind!r}") from None
    if level not in (1, 2, 3, 4, 5):
        raise PresetError(f"severity level must be 1..5, got {level}")
    return SeverityPreset(kind, level, dict(CORRUPTION_PRESETS[kind][level - 1]))


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise per channel-pixel and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    return np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0)


def shot_noise(img: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson photon noise: clip(Poisson(img * scale) / scale, 0, 1).

    `scale` is the photon count per unit intensity; lower values mean
    stronger noise (extreme low light).
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return np.clip(rng.poisson(img * scale) / scale, 0.0, 1.0)


def impulse_noise(img: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Salt-and-pepper: each pixel is replaced with probability `prob`.

    Replacement is 0 or 1 with equal probability and applies to all three
    channels jointly, so corrupted pixels look pure black or white.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0, 1], got {prob}")
    h, w = img.shape[:2]
    hit = rng.random((h, w)) < prob
    salt = rng.random((h, w)) < 0.5
    out = img.copy()
    out[hit] = salt[hit, None].astype(np.float64)
    return out


def disk_kernel(radius: float, alias_blur: float) -> np.ndarray:
    """Normalized disk of the given radius, softened by a small Gaussian.

    Cells whose center lies within `radius` are included, then the whole
    kernel is blurred with std `alias_blur` (truncated at 4 sigma) and
    renormalized to sum to 1.
    """
    r = int(np.ceil(radius))
    pad = int(np.ceil(4.0 * alias_blur)) if alias_blur > 0 else 0
    span = np.arange(-(r + pad), r + pad + 1)
    xx, yy = np.meshgrid(span, span)
    kernel = ((xx * xx + yy * yy) <= radius * radius).astype(np.float64)
    if alias_blur > 0:
        kernel = gaussian_filter(kernel, alias_blur, mode="constant", truncate=4.0)
    return kernel / kernel.sum()


def defocus_blur(
    img: np.ndarray, radius: float, alias_blur: float, rng=None
) -> np.ndarray:
    """Convolve each channel with a normalized disk kernel (reflect padding)."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    kernel = disk_kernel(radius, alias_blur)
    out = np.empty_like(img)
    for ch in range(3):
        out[:, :, ch] = nd_convolve(img[:, :, ch], kernel, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def zoom_factors(start: float, stop: float, step: float) -> np.ndarray:
    """Grid start, start+step, ... up to and including stop when it lands
    on the step grid (otherwise the largest on-grid value below it)."""
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def _sample_axis_aligned(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Separable bilinear gather at fractional (rows, cols) grid positions."""
    h, w = img.shape[:2]
    rows = np.clip(rows, 0.0, h - 1)
    cols = np.clip(cols, 0.0, w - 1)
    r0 = np.floor(rows).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    rt = (rows - r0)[:, None, None]
    tmp = img[r0] * (1.0 - rt) + img[r1] * rt
    c0 = np.floor(cols).astype(np.int64)
    c1 = np.minimum(c0 + 1, w - 1)
    ct = (cols - c0)[None, :, None]
    return tmp[:, c0] * (1.0 - ct) + tmp[:, c1] * ct


def center_zoom(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale by `factor` about the image center (bilinear), keeping dims."""
    if factor == 1.0:
        return img.copy()
    h, w = img.shape[:2]
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows = cr + (np.arange(h) - cr) / factor
    cols = cc + (np.arange(w) - cc) / factor
    return _sample_axis_aligned(img, rows, cols)


def zoom_blur(
    img: np.ndarray, zoom_start: float, zoom_stop: float, zoom_step: float, rng=None
) -> np.ndarray:
    """Average of progressively zoomed-in frames (radial streak blur)."""
    if zoom_start != 1.0 or zoom_stop < zoom_start or zoom_step <= 0:
        raise ValueError(
            f"need zoom_start == 1.0 <= zoom_stop and zoom_step > 0, "
            f"got ({zoom_start}, {zoom_stop}, {zoom_step})"
        )
    factors = zoom_factors(zoom_start, zoom_stop, zoom_step)
    acc = np.zeros_like(img)
    for z in factors:
        acc += center_zoom(img, z)
    return np.clip(acc / len(factors), 0.0, 1.0)


def pixelate(img: np.ndarray, ratio: float, rng=None) -> np.ndarray:
    """Downscale to ceil(dims * ratio) bilinearly, upscale back with nearest."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    h, w = img.shape[:2]
    small_h = int(np.ceil(h * ratio))
    small_w = int(np.ceil(w * ratio))
    if (small_h, small_w) == (h, w):
        return img.copy()
    small = resize(img, small_h, small_w, mode="bilinear")
    return resize(small, h, w, mode="nearest")


def _warp(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-pixel bilinear resample with reflect boundary."""
    coords = np.stack([rows, cols])
    out = np.empty_like(img)
    for ch in range(3):
        out[:, :, ch] = map_coordinates(img[:, :, ch], coords, order=1, mode="reflect")
    return out


def _affine_jitter(img: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Warp by the affine map that jitters 3 control points uniformly."""
    h, w = img.shape[:2]
    cx, cy = w // 2, h // 2
    s = min(h, w) // 3
    src = np.array([[cx + s, cy + s], [cx + s, cy - s], [cx - s, cy - s]], dtype=np.float64)
    dst = src + rng.uniform(-magnitude, magnitude, size=(3, 2))
    # forward map dst = A @ src + b; sample output pixels through its inverse
    basis = np.hstack([src, np.ones((3, 1))])
    try:
        coeff = np.linalg.solve(basis, dst)  # (3, 2): rows (A.T | b.T)
    except np.linalg.LinAlgError:
        return img.copy()
    fwd_a = coeff[:2].T
    fwd_b = coeff[2]
    det = np.linalg.det(fwd_a)
    if abs(det) < 1e-8:
        return img.copy()
    inv_a = np.linalg.inv(fwd_a)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv_a[0, 0] * (xs - fwd_b[0]) + inv_a[0, 1] * (ys - fwd_b[1])
    sy = inv_a[1, 0] * (xs - fwd_b[0]) + inv_a[1, 1] * (ys - fwd_b[1])
    return _warp(img, sy, sx)


def elastic_transform(
    img: np.ndarray,
    alpha: float,
    sigma: float,
    alpha_affine: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Random affine jitter followed by a smoothed displacement field.

    The field is uniform noise in [-1, 1] smoothed by a Gaussian of std
    `sigma` (truncated at 4 sigma) and scaled by `alpha`; sampling is
    bilinear with reflect boundary. alpha == 0 and alpha_affine == 0 is the
    identity.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h, w = img.shape[:2]
    out = img
    if alpha_affine != 0:
        out = _affine_jitter(out, alpha_affine, rng)
    if alpha != 0:
        dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect", truncate=4.0) * alpha
        dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect", truncate=4.0) * alpha
        rows = np.arange(h, dtype=np.float64)[:, None] + dy
        cols = np.arange(w, dtype=np.float64)[None, :] + dx
        out = _warp(out, rows, cols)
    elif out is img:
        out = img.copy()
    return np.clip(out, 0.0, 1.0)


def contrast(img: np.ndarray, factor: float, rng=None) -> np.ndarray:
    """Scale deviation from the per-channel mean: clip((x - mu)*factor + mu)."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"factor must be in (0, 1], got {factor}")
    if factor == 1.0:
        return img.copy()
    mu = img.mean(axis=(0, 1), keepdims=True)
    return np.clip((img - mu) * factor + mu, 0.0, 1.0)


_DISPATCH = {
    CorruptionKind.GAUSSIAN_NOISE: gaussian_noise,
    CorruptionKind.SHOT_NOISE: shot_noise,
    CorruptionKind.IMPULSE_NOISE: impulse_noise,
    CorruptionKind.DEFOCUS_BLUR: defocus_blur,
    CorruptionKind.ZOOM_BLUR: zoom_blur,
    CorruptionKind.PIXELATE: pixelate,
    CorruptionKind.ELASTIC_TRANSFORM: elastic_transform,
    CorruptionKind.CONTRAST: contrast,
}

_NEEDS_RNG = {
    CorruptionKind.GAUSSIAN_NOISE,
    CorruptionKind.SHOT_NOISE,
    CorruptionKind.IMPULSE_NOISE,
    CorruptionKind.ELASTIC_TRANSFORM,
}


def apply_corruption(
    img: np.ndarray, preset: SeverityPreset, rng: np.random.Generator
) -> np.ndarray:
    """Dispatch to the operator matching the preset; dims are preserved."""
    try:
        fn = _DISPATCH[CorruptionKind(preset.kind)]
    except (KeyError, ValueError):
        raise PresetError(f"unknown corruption kind {preset.kind!r}") from None
    if CorruptionKind(preset.kind) in _NEEDS_RNG:
        out = fn(img, rng=rng, **preset.params)
    else:
        out = fn(img, **preset.params)
    assert out.shape == img.shape
    return out
