"""PNG-backed image helpers shared across the package.

Conventions: RGB images are float32 arrays in [0, 1] with shape (H, W, 3);
binary masks are boolean arrays of shape (H, W). Masks are stored on disk as
single-channel PNGs with values {0, 255}.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(np.float32) / 255.0


def save_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def resize(img: np.ndarray, size_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float image (2-D, or 3-D with channels last)."""
    h, w = size_hw
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        out = PILImage.fromarray(img, mode="F").resize((w, h), PILImage.BILINEAR)
        return np.asarray(out, dtype=np.float32)
    chans = [
        np.asarray(
            PILImage.fromarray(img[..., c], mode="F").resize((w, h), PILImage.BILINEAR),
            dtype=np.float32,
        )
        for c in range(img.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB image."""
    img = np.asarray(img)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
