"""PNG read/write helpers (8-bit, via Pillow)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataError


def write_png(path, arr: np.ndarray) -> None:
    """Save a (H, W) or (H, W, 3) uint8 array losslessly."""
    if arr.dtype != np.uint8:
        raise DataError(f"write_png expects uint8, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 (H, W, 3) in [0, 1]; grayscale is replicated."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
