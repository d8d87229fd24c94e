"""Dense tensor helpers used by every merge strategy.

Tensors are plain numpy arrays. Checkpoint weights are float32; task vectors
are carried in float64 so that ``base + (ft - base)`` recomposes to ``ft``
exactly after rounding back to float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def tensor(data, shape=None, dtype=np.float32) -> np.ndarray:
    """Build an immutable, contiguous, finite tensor."""
    arr = np.array(data, dtype=dtype, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape entries must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise ShapeError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    out = np.add(a, b)
    out.setflags(write=False)
    return out


def scale(a: np.ndarray, s: float) -> np.ndarray:
    if not math.isfinite(s):
        raise ValueError(f"scale factor must be finite, got {s}")
    out = np.multiply(a, np.asarray(s, dtype=a.dtype))
    out.setflags(write=False)
    return out


def keep_count(total: int, keep_fraction: float) -> int:
    """Number of values kept out of ``total`` at ``keep_fraction``: ceil(f * n).

    A relative slack of 1e-12 absorbs representation error such as
    ``0.07 * 100 == 7.000000000000001``.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    k = math.ceil(keep_fraction * total * (1.0 - 1e-12))
    return min(total, max(1, k)) if total else 0


def global_magnitude_threshold(tensors: Sequence[np.ndarray], keep_fraction: float) -> float:
    """Magnitude of the k-th largest value across all tensors, k = ceil(f * n).

    Values strictly above the threshold are always kept; values equal to it
    are kept in flat iteration order until k values survive (see
    :func:`tie_budget`).
    """
    if len(tensors) == 0:
        raise ShapeError("global_magnitude_threshold needs at least one tensor")
    mags = np.concatenate([np.abs(np.ravel(t)) for t in tensors])
    if mags.size == 0:
        raise ShapeError("global_magnitude_threshold got only empty tensors")
    k = keep_count(mags.size, keep_fraction)
    return float(np.partition(mags, mags.size - k)[mags.size - k])


@dataclass
class TieBudget:
    """Mutable count of threshold-equal values that may still be kept."""

    remaining: int


def tie_budget(tensors: Sequence[np.ndarray], threshold: float, keep_fraction: float) -> TieBudget:
    total = sum(int(np.size(t)) for t in tensors)
    above = sum(int(np.count_nonzero(np.abs(t) > threshold)) for t in tensors)
    return TieBudget(keep_count(total, keep_fraction) - above)


def trim(x: np.ndarray, threshold: float, budget: TieBudget | None = None) -> np.ndarray:
    """Zero values with ``|v| < threshold``.

    Values with ``|v| == threshold`` are kept while ``budget.remaining > 0``,
    earliest flat index first; the budget is decremented for each one kept.
    Without a budget every threshold-equal value is kept.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    mags = np.abs(x)
    keep = mags > threshold
    ties = np.flatnonzero(mags == threshold)
    if budget is None:
        keep.flat[ties] = True
    else:
        n = max(0, min(budget.remaining, ties.size))
        keep.flat[ties[:n]] = True
        budget.remaining -= n
    out = np.where(keep, x, np.zeros((), dtype=x.dtype))
    out.setflags(write=False)
    return out


def trim_top_fraction(tensors: Sequence[np.ndarray], keep_fraction: float) -> list[np.ndarray]:
    """Keep exactly ceil(f * n) largest-magnitude values across ``tensors`` jointly."""
    if keep_fraction == 1.0:
        return list(tensors)
    threshold = global_magnitude_threshold(tensors, keep_fraction)
    budget = tie_budget(tensors, threshold, keep_fraction)
    return [trim(t, threshold, budget) for t in tensors]
