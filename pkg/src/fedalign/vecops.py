"""Primitive operations on flat parameter vectors.

Vectors are plain 1-D float64 numpy arrays. ``as_param_vector`` is the one
place that validates them; every public function here runs its inputs
through it.
"""

from __future__ import annotations

import math
import statistics
from typing import Sequence

import numpy as np


def as_param_vector(values, name: str = "vector") -> np.ndarray:
    """Return ``values`` as a read-only float64 vector, rejecting NaN/Inf and empties."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one element")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def _same_length(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")


def sign(v) -> np.ndarray:
    """Three-valued signum as int8; ``sign(0) == 0``."""
    return np.sign(as_param_vector(v)).astype(np.int8)


def l2_norm(v) -> float:
    return float(np.linalg.norm(as_param_vector(v)))


def top_k_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|v_j|``; ties go to the lower index.

    No validation, used on hot paths by callers that already checked ``v``.
    """
    # stable sort on -|v| keeps lower indices first among equal magnitudes
    return np.argsort(-np.abs(v), kind="stable")[:k]


def top_k_mask(v, k: int) -> np.ndarray:
    v = as_param_vector(v)
    if not 1 <= k <= v.size:
        raise ValueError(f"k must be in [1, {v.size}], got {k}")
    mask = np.zeros(v.size, dtype=np.int8)
    mask[top_k_indices(v, k)] = 1
    return mask


def sign_alignment_ratio(x, y) -> float:
    """Fraction of coordinates where ``sign(x)`` and ``sign(y)`` agree."""
    x, y = as_param_vector(x, "x"), as_param_vector(y, "y")
    _same_length(x, y)
    mismatches = np.count_nonzero(np.sign(x) != np.sign(y))
    return 1.0 - mismatches / x.size


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for the given input (e.g. zero norm)."""


def cosine_similarity(a, b) -> float:
    a, b = as_param_vector(a, "a"), as_param_vector(b, "b")
    _same_length(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def mz_scores(values: Sequence[float]) -> np.ndarray:
    """Distance of each value from the median, in population standard deviations.

    Statistics are computed with the ``statistics`` module so the result does
    not depend on input order (numpy's pairwise summation does). A set with
    zero spread scores every element 0.
    """
    xs = [float(x) for x in values]
    if not xs:
        raise ValueError("mz_scores needs at least one value")
    if not all(math.isfinite(x) for x in xs):
        raise ValueError("mz_scores input contains non-finite values")
    med = statistics.median(xs)
    sigma = statistics.pstdev(xs)
    if sigma == 0.0:
        return np.zeros(len(xs))
    return np.array([(x - med) / sigma for x in xs])
