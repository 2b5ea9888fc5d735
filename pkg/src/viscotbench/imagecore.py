"""Canonical image representation, file IO, deterministic RNG and geometry.

Images are float64 numpy arrays of shape (H, W, 3) with intensities in
[0, 1]. Quantization to 8-bit happens only at file boundaries.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import EmptyRegionError, ImageFormatError

__all__ = [
    "BBox",
    "as_image",
    "validate_image",
    "load_image",
    "save_image",
    "crop",
    "resize",
    "make_rng",
    "derive_seed",
    "round_half_up",
]


def round_half_up(values):
    """Round to nearest integer with ties going up (0.5 -> 1)."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless img is a (H, W, 3) float array in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image dims must be >= 1, got {img.shape[:2]}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"expected float intensities, got dtype {img.dtype}")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"intensities outside [0, 1]: min={lo}, max={hi}")


def as_image(arr) -> np.ndarray:
    """Coerce to a validated float64 (H, W, 3) image array."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    validate_image(img)
    return img


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def clamped(self, width: float, height: float) -> "BBox":
        """Clamp to the [0, width] x [0, height] frame (never inverts)."""
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator; same seed gives the same stream."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary hashable parts (order matters)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def load_image(path) -> np.ndarray:
    """Load a PNG or JPEG file as a [0, 1] float image.

    Grayscale inputs are broadcast to 3 channels; alpha is dropped.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageFormatError(f"unsupported format {im.format!r}: {path}")
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return as_image(arr)


def quantize(img: np.ndarray) -> np.ndarray:
    """Simulate the 8-bit round trip: round(i*255)/255 with half-up ties."""
    return round_half_up(np.asarray(img) * 255.0) / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write an 8-bit PNG; each intensity maps to round(i*255), half-up."""
    validate_image(np.asarray(img, dtype=np.float64))
    bytes_ = round_half_up(np.asarray(img) * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        PILImage.fromarray(bytes_, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def crop(img: np.ndarray, box: BBox) -> np.ndarray:
    """Extract the pixels of the clamped, half-up-rounded box.

    The box is clamped to the image frame first, then rounded. Output is
    always at least 1x1; a box fully outside the image raises
    EmptyRegionError.
    """
    h, w = img.shape[:2]
    if box.x2 <= 0 or box.x1 >= w or box.y2 <= 0 or box.y1 >= h:
        raise EmptyRegionError(f"box {box} does not intersect {w}x{h} image")
    clamped = box.clamped(float(w), float(h))
    x1, y1, x2, y2 = (int(v) for v in round_half_up(clamped.as_list()))
    # rounding can collapse slivers; keep at least one pixel inside bounds
    if x2 <= x1:
        x1 = min(x1, w - 1)
        x2 = x1 + 1
    if y2 <= y1:
        y1 = min(y1, h - 1)
        y2 = y1 + 1
    return img[y1:y2, x1:x2].copy()


def _linear_coords(n_in: int, n_out: int):
    """Source coords for pixel-center-aligned linear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(src, 0.0, n_in - 1)


def _nearest_index(n_in: int, n_out: int):
    scale = n_in / n_out
    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * scale)
    return np.clip(idx, 0, n_in - 1).astype(np.int64)


def resize(img: np.ndarray, new_h: int, new_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize to (new_h, new_w) with bilinear or nearest sampling."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target dims must be >= 1, got {new_h}x{new_w}")
    h, w = img.shape[:2]
    if mode == "nearest":
        rows = _nearest_index(h, new_h)
        cols = _nearest_index(w, new_w)
        return img[rows][:, cols].copy()
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    if (new_h, new_w) == (h, w):
        return img.copy()
    rows = _linear_coords(h, new_h)
    cols = _linear_coords(w, new_w)
    r0 = np.floor(rows).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    rt = (rows - r0)[:, None, None]
    tmp = img[r0] * (1.0 - rt) + img[r1] * rt
    c0 = np.floor(cols).astype(np.int64)
    c1 = np.minimum(c0 + 1, w - 1)
    ct = (cols - c0)[None, :, None]
    out = tmp[:, c0] * (1.0 - ct) + tmp[:, c1] * ct
    return np.clip(out, 0.0, 1.0)
