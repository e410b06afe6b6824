"""Sparsemax: Euclidean projection onto the probability simplex."""

from __future__ import annotations

import numpy as np

from .mapping import as_float


def sparsemax(z) -> np.ndarray:
    """Project each row of ``z`` (last axis) onto the simplex.

    Sort-and-threshold closed form: with ``z`` sorted descending, the support
    size ``k`` is the largest index such that ``1 + k z_(k) > sum_{j<=k} z_(j)``,
    and ``tau = (sum_{j<=k} z_(j) - 1) / k``.
    """
    z = as_float(z)
    n = z.shape[-1]
    zs = -np.sort(-z, axis=-1)
    cssv = np.cumsum(zs, axis=-1) - 1.0
    k = np.arange(1, n + 1, dtype=z.dtype)
    support = zs - cssv / k > 0
    rho = np.sum(support, axis=-1, keepdims=True)
    tau = np.take_along_axis(cssv, rho - 1, axis=-1) / rho
    return np.maximum(z - tau, 0.0)


def sparsemax_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of sparsemax given its output."""
    supp = out > 0
    count = np.sum(supp, axis=-1, keepdims=True)
    mean = np.sum(dout * supp, axis=-1, keepdims=True) / count
    return np.where(supp, dout - mean, 0.0)
