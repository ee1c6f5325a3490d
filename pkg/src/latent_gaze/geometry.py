"""Fixed sensor geometry shared by the renderer and the optical model."""

from functools import lru_cache

import numpy as np

PATCH_SIZE = 256
CANVAS_SIZE = 288
MASK_RADIUS = 128.0
N_MASKS = 16

# Supported gaze box in degrees.  Yaw is symmetric at the wider published bound.
PITCH_RANGE = (-42.68, 22.45)
YAW_RANGE = (-56.50, 56.50)


@lru_cache(maxsize=None)
def _circle(size: int, radius: float) -> np.ndarray:
    c = (size - 1) / 2.0
    r = np.arange(size, dtype=np.float64) - c
    inside = r[:, None] ** 2 + r[None, :] ** 2 <= radius * radius
    inside.setflags(write=False)
    return inside


def circle_mask(size: int = PATCH_SIZE, radius: float = MASK_RADIUS) -> np.ndarray:
    """Boolean support of the centered aperture (read-only, cached)."""
    return _circle(size, radius)


def in_circle_count(size: int = PATCH_SIZE, radius: float = MASK_RADIUS) -> int:
    return int(circle_mask(size, radius).sum())
