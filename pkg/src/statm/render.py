"""Binary PPM/PGM writers for masks and alpha maps (dependency-free, diffable)."""

from __future__ import annotations

import numpy as np

from statm.errors import ConfigurationError

# distinct colors for mask labels; label 0 (background) stays black
MASK_PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (250, 190, 190),
    (0, 128, 128), (170, 110, 40), (128, 0, 0), (128, 128, 0),
], dtype=np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """P6 binary PPM from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise ConfigurationError(f"write_ppm: need (H, W, 3) uint8, got "
                                 f"{rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """P5 binary PGM from an (H, W) uint8 array."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ConfigurationError(f"write_pgm: need (H, W) uint8, got "
                                 f"{gray.shape} {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    return MASK_PALETTE[mask % len(MASK_PALETTE)]


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(frame), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
