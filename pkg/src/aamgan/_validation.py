"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, ShapeMismatchError


def check_shape(points, n_points: int | None = None, name: str = "shape") -> np.ndarray:
    """Return ``points`` as a finite float64 ``(v, 2)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size % 2 == 0:
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatchError(f"{name} must have shape (v, 2), got {arr.shape}")
    if arr.shape[0] < 3:
        raise ShapeMismatchError(f"{name} needs at least 3 landmarks, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    if n_points is not None and arr.shape[0] != n_points:
        raise ShapeMismatchError(
            f"{name} has {arr.shape[0]} landmarks, expected {n_points}")
    return arr


def check_image(image, name: str = "image") -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D grayscale raster, got shape {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vector(v, size: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape[0] != size:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {size}")
    return arr


def check_random_seed(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
