"""8-bit image I/O: RGB PNGs for images, binary PGMs for masks.

Arrays are channel-first float64 in [0, 1] inside the library; files are
plain 8-bit. Round-trips are lossless for 8-bit data. All loaders raise
OSError subclasses with the path in the message (CLI exit code 2).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractViolation


class ImageIOError(OSError):
    """Unreadable, truncated, or wrongly formatted image file."""


def load_rgb(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a (3, H, W) array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            data = np.asarray(img, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return data.transpose(2, 0, 1) / 255.0


def save_rgb(path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] array as an 8-bit RGB PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractViolation(f"expected (3, H, W) image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a PGM (or grayscale PNG) mask, thresholded at 128, as 0/1 floats."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"cannot read mask {path}: {exc}") from exc
    return (data >= 128).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a 0/1 mask as a binary (P5) PGM with values {0, 255}."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ContractViolation(f"expected (H, W) mask, got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractViolation("mask must be binary 0/1")
    data = (mask * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PPM")


def save_gray(path, image: np.ndarray) -> None:
    """Write a single-channel [0, 1] array as an 8-bit grayscale PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractViolation(f"expected (H, W) array, got shape {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")
