"""Dice overlap and average surface distance (pixels) for binary masks."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    """ASD is undefined when either mask is empty."""


def _as_bool(a) -> np.ndarray:
    return np.asarray(a).astype(bool)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def dice(a, b) -> float:
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


_FOUR = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image is background."""
    m = _as_bool(mask)
    interior = ndimage.binary_erosion(m, structure=_FOUR, border_value=0)
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # exact euclidean distance from every pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].mean())


def asd(a, b) -> float:
    """Symmetric average surface distance between two nonempty masks."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("average surface distance needs two nonempty masks")
    ba, bb = boundary(a), boundary(b)
    return 0.5 * (_directed(ba, bb) + _directed(bb, ba))
