# indicators.py - numeric helpers shared by plant, spear, shield and evolve
import logging
import math
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-9


def nominal_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-column mean and standard deviation of a (ticks, variables) block.

    Columns with no spread get SIGMA_FLOOR so callers can divide safely.
    Returns NaN columns if the block is empty.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        n = values.shape[1] if values.ndim == 2 else 0
        return np.full(n, math.nan), np.full(n, math.nan)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    return mean, np.maximum(std, SIGMA_FLOOR)


def longest_run(flags: Sequence[bool]) -> int:
    """Length of the longest run of consecutive truthy entries."""
    best = run = 0
    for flag in flags:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best


def minmax_scale(values: np.ndarray) -> np.ndarray:
    """
    Min-max scale to [0, 1].

    A degenerate range (max == min) scales everything to 0.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values.copy()
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def mean_distance_to(points: np.ndarray, references: np.ndarray) -> np.ndarray:
    """
    Mean l2 distance from each row of points to all rows of references.

    Args:
        points: (n, d) array
        references: (m, d) array, m >= 1

    Returns:
        (n,) array of mean distances
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    references = np.atleast_2d(np.asarray(references, dtype=float))
    diffs = points[:, None, :] - references[None, :, :]
    return np.sqrt((diffs ** 2).sum(axis=2)).mean(axis=1)


def mean_pairwise_distance(points: np.ndarray) -> float:
    """Mean l2 distance over all unordered pairs; NaN with fewer than two points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < 2:
        return math.nan
    diffs = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=2))
    return float(dist[np.triu_indices(n, k=1)].mean())


def pad_curve(curve: Sequence[float], length: int) -> np.ndarray:
    """Truncate or pad with the final value to exactly `length` entries."""
    curve = list(curve)
    if length <= 0:
        return np.zeros(0)
    if not curve:
        return np.full(length, math.nan)
    if len(curve) >= length:
        return np.asarray(curve[:length], dtype=float)
    return np.asarray(curve + [curve[-1]] * (length - len(curve)), dtype=float)
