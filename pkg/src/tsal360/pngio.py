"""8-bit PNG read/write for frames and saliency maps (255 maps to 1.0)."""

from __future__ import annotations

import numpy as np
from PIL import Image


def read_gray(path) -> np.ndarray:
    """Grayscale PNG -> float32 (H, W) in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def write_gray(path, data: np.ndarray) -> None:
    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    """RGB PNG -> float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def write_rgb(path, data: np.ndarray) -> None:
    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
