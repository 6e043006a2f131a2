"""Image file I/O. PNG for everything we write; PGM/PNG accepted on read."""

from __future__ import annotations

import numpy as np
from PIL import Image

MASK_THRESHOLD = 128      # byte masks binarize at this value (>= is foreground)


def load_rgb(path):
    """(3,H,W) float64 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_gray(path):
    """(H,W) float64 in [0,1]; color inputs are luma-converted."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_mask(path):
    """(H,W) float64 strictly {0,1}: bytes >= 128 count as foreground."""
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    return (raw >= MASK_THRESHOLD).astype(np.float64)


def save_gray(path, values):
    """Write [0,1] floats as 8-bit grayscale; rounds half away from zero."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (H,W), got {arr.shape}")
    byte = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(path)


def save_rgb(path, values):
    """Write (3,H,W) [0,1] floats as an 8-bit PNG."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3,H,W), got {arr.shape}")
    byte = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(byte.transpose(1, 2, 0), mode="RGB").save(path)
