"""Input validation shared by the estimator layer."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """(N, S, S, 3) float64 in a sane range; grayscale (N, S, S) is promoted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=-1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(
            f"expected images shaped (N, S, S, 3) or (N, S, S), got {X.shape}"
        )
    if X.shape[1] != X.shape[2]:
        raise DimensionError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise DimensionError(
            f"images are {X.shape[1]}px but this model expects {image_size}px"
        )
    if not np.isfinite(X).all():
        raise DataError("images contain non-finite values")
    return X


def check_bags(X) -> list[np.ndarray]:
    """A sequence of (N_i, d) instance-feature arrays with one shared d."""
    if len(X) == 0:
        raise DataError("no bags given")
    bags = []
    d = None
    for i, bag in enumerate(X):
        arr = np.asarray(bag, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionError(f"bag {i}: expected (N >= 1, d) features, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError(f"bag {i}: features contain non-finite values")
        if d is None:
            d = arr.shape[1]
        elif arr.shape[1] != d:
            raise DimensionError(f"bag {i}: feature dim {arr.shape[1]} != {d} of bag 0")
        bags.append(arr)
    return bags


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"expected {n} labels in a flat array, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        cast = y.astype(np.int64, copy=False)
        if not np.array_equal(cast, y):
            raise DataError("labels must be integers")
        y = cast
    return y.astype(np.int64, copy=False)
