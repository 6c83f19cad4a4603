"""PNG helpers. Display conversion is clamp-to-[0,1] only, no gamma."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    clamped = np.clip(image, 0.0, 1.0)
    return np.round(clamped * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: str | Path):
    Image.fromarray(to_uint8(image), mode="RGB").save(Path(path))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask(mask: np.ndarray, path: str | Path):
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(Path(path))


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("L"))
    return arr >= 128
