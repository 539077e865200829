"""RGB uint8 image helpers: validation, bilinear resize, center crop, PPM I/O.

Images are plain ``numpy`` arrays of shape (height, width, 3), dtype uint8.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(ValueError):
    pass


def validate_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"zero-sized image {arr.shape}")
    if arr.dtype != np.uint8:
        raise ImageError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres; identical sizes give an exact identity map
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize returning float64 pixel values in [0, 255]."""
    img = validate_image(img)
    x = img.astype(np.float64)
    h, w, _ = x.shape
    if (h, w) == (height, width):
        return x
    lo, hi, f = _axis_weights(h, height)
    x = x[lo] * (1.0 - f)[:, None, None] + x[hi] * f[:, None, None]
    lo, hi, f = _axis_weights(w, width)
    x = x[:, lo] * (1.0 - f)[None, :, None] + x[:, hi] * f[None, :, None]
    return x


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Resize so the short side equals ``size``, then take the central square."""
    img = validate_image(img)
    h, w, _ = img.shape
    if min(h, w) == size:
        x = img.astype(np.float64)
    else:
        scale = size / min(h, w)
        x = resize_bilinear(img, max(size, round(h * scale)), max(size, round(w * scale)))
    h, w, _ = x.shape
    top = (h - size) // 2
    left = (w - size) // 2
    return x[top : top + size, left : left + size]


def to_chw(pixels: np.ndarray) -> np.ndarray:
    """[0, 255] HWC pixels -> [-1, 1] CHW floats."""
    return (pixels / 127.5 - 1.0).transpose(2, 0, 1)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(validate_image(img), mode="RGB").save(Path(path), format="PPM")


def read_ppm(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)
