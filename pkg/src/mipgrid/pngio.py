"""8-bit PNG read/write helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    """Float image in ``[0, 1]``; keeps the alpha channel when present."""
    with Image.open(path) as im:
        mode = im.mode
        if mode not in ("RGBA", "RGB", "L", "LA"):
            im = im.convert("RGBA")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write a float image (clamped to ``[0, 1]``) as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
