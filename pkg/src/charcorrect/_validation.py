"""Input validation helpers and the exception types raised across the package."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array extents are incompatible."""


class GeometryError(ValueError):
    """Raised for kernel/stride/window combinations that do not tile the input."""


class DivergenceError(FloatingPointError):
    """Raised when training produces a non-finite loss or gradient."""


def as_float_array(x, name: str = "input", ndim: int | None = None) -> np.ndarray:
    """Convert ``x`` to a float64 array, checking rank and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{names}: shape mismatch {a.shape} vs {b.shape}")


def check_probability_rows(p: np.ndarray, name: str = "probabilities", atol: float = 1e-6) -> None:
    """Every vector along the last axis must be a distribution."""
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError(f"{name}: entries outside [0, 1]")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol):
        raise ValueError(f"{name}: rows do not sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")
