"""8-bit PNG read/write for [0, 1] float images."""

from __future__ import annotations

import numpy as np
from PIL import Image


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-even (numpy's rint)."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str, image: np.ndarray) -> None:
    arr = quantize(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
