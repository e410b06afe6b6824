"""Restricted self-attention mapping.

A classification result of any length ``n >= 2`` is sorted descending and
then mapped onto a fixed ``m``-dimensional vector. Each sorted entry ``a^x``
owns a bell-shaped column

    C^x(i) = a^x * exp(-(i/(m-1) - (x-1)/n)^2 / (2 sigma^2)),  i = 0..m-1

and the columns are mixed with attention weights computed from a single
query (built from the largest probability) against one key per entry:

    att = softmax([k^1 .. k^n]^T q^1),  q^1 = wq * a^1,  k^x = wk * a^x
    output = sort_desc(M_G @ att),      M_G = [C^1 .. C^n]

Inputs default to float64. The batched helpers at the bottom are what the
trainer differentiates through; they keep whatever float type they are
given, which lets gradient checks run in extended precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateInputError, InvalidProbabilityError, NumericOverflowError

DEFAULT_M = 100
DEFAULT_SIGMA = 0.01


@dataclass(frozen=True)
class SortedProbVector:
    values: np.ndarray
    permutation: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class MappingParams:
    """Learnable query/key projections plus the fixed mapping hyperparameters."""

    wq: np.ndarray
    wk: np.ndarray
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.wq = np.asarray(self.wq, dtype=np.float64).reshape(-1)
        self.wk = np.asarray(self.wk, dtype=np.float64).reshape(-1)
        if self.wq.shape != self.wk.shape:
            raise ValueError(f"wq and wk shapes differ: {self.wq.shape} vs {self.wk.shape}")
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not (np.all(np.isfinite(self.wq)) and np.all(np.isfinite(self.wk))):
            raise ValueError("wq/wk contain non-finite values")

    @property
    def m(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, m: int = DEFAULT_M, sigma: float = DEFAULT_SIGMA, rng=None) -> "MappingParams":
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(m)
        wq = rng.uniform(-bound, bound, size=m)
        wk = rng.uniform(-bound, bound, size=m)
        return cls(wq, wk, sigma)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def normalize_probs(raw, is_logits: bool = False) -> np.ndarray:
    """Turn a raw classifier output into a probability vector.

    Logits go through a max-shifted softmax; probabilities are rescaled to
    sum to one.
    """
    p = np.asarray(raw, dtype=np.float64).reshape(-1)
    if p.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 classes, got {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise InvalidProbabilityError("input contains non-finite entries")
    if is_logits:
        return softmax(p)
    if np.any(p < 0):
        raise InvalidProbabilityError("negative probability")
    total = p.sum()
    if total <= 0:
        raise InvalidProbabilityError("probabilities sum to zero")
    return p / total


def sort_desc(p) -> SortedProbVector:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 classes, got {p.shape[0]}")
    perm = np.argsort(-p, kind="stable")
    return SortedProbVector(p[perm], perm)


def _as_sorted_values(a) -> np.ndarray:
    values = a.values if isinstance(a, SortedProbVector) else np.asarray(a, dtype=np.float64)
    if values.shape[-1] < 2:
        raise DegenerateInputError(f"need at least 2 classes, got {values.shape[-1]}")
    return values


def attention_scores(a, params: MappingParams) -> np.ndarray:
    """Softmax over ``k^x . q^1`` for a single sorted vector."""
    a = _as_sorted_values(a)
    q1 = params.wq * a[0]
    keys = np.outer(a, params.wk)  # row x is k^x
    with np.errstate(over="ignore", invalid="ignore"):
        scores = keys @ q1
    if not np.all(np.isfinite(scores)):
        raise NumericOverflowError("attention scores are not finite")
    att = softmax(scores)
    if not np.all(np.isfinite(att)):
        raise NumericOverflowError("attention softmax is not finite")
    return att


def gaussian_column(x: int, a_x: float, n: int, m: int, sigma: float) -> np.ndarray:
    """Column ``C^x`` for the 1-based element index ``x``."""
    if not 1 <= x <= n:
        raise ValueError(f"x must be in 1..{n}, got {x}")
    i = np.arange(m, dtype=np.float64)
    offset = i / (m - 1) - (x - 1) / n
    return a_x * np.exp(-(offset**2) / (2.0 * sigma**2))


@lru_cache(maxsize=64)
def _gaussian_basis_cached(n: int, m: int, sigma: float) -> np.ndarray:
    i = np.arange(m, dtype=np.float64)[:, None]
    centers = np.arange(n, dtype=np.float64)[None, :] / n
    basis = np.exp(-((i / (m - 1) - centers) ** 2) / (2.0 * sigma**2))
    basis.setflags(write=False)
    return basis


def gaussian_basis(n: int, m: int, sigma: float) -> np.ndarray:
    """``M_G`` with every column divided by its ``a^x``; shape ``(m, n)``, read-only."""
    return _gaussian_basis_cached(int(n), int(m), float(sigma))


def map_to_fixed_dim(a, params: MappingParams) -> np.ndarray:
    """Map one sorted vector of length n to a sorted vector of length m."""
    a = _as_sorted_values(a)
    att = attention_scores(a, params)
    mg = gaussian_basis(a.shape[0], params.m, params.sigma) * a[None, :]
    out = mg @ att
    return -np.sort(-out)


# ---------------------------------------------------------------------------
# batched forward/backward used during training


def as_float(x) -> np.ndarray:
    """``np.asarray`` that keeps any floating dtype (extended precision included)."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def map_batch_forward(a: np.ndarray, wq: np.ndarray, wk: np.ndarray, sigma: float):
    """Map a ``(B, n)`` batch of already-sorted rows. Returns ``(v, cache)``."""
    a = as_float(a)
    if a.ndim != 2 or a.shape[1] < 2:
        raise DegenerateInputError(f"expected (B, n>=2) batch, got shape {a.shape}")
    m = wq.shape[0]
    s = wq @ wk
    pair = a * a[:, :1]  # a^x * a^1
    with np.errstate(over="ignore", invalid="ignore"):
        scores = s * pair
    if not np.all(np.isfinite(scores)):
        raise NumericOverflowError("attention scores are not finite")
    att = softmax(scores, axis=1)
    basis = gaussian_basis(a.shape[1], m, sigma)
    weighted = a * att
    out = weighted @ basis.T  # (B, m)
    perm = np.argsort(-out, axis=1, kind="stable")
    v = np.take_along_axis(out, perm, axis=1)
    cache = (a, pair, att, basis, perm, wq, wk)
    return v, cache


def map_batch_backward(dv: np.ndarray, cache):
    """Gradients of the loss w.r.t. ``wq`` and ``wk``.

    The output sort is a fixed permutation per row, so its backward is a
    scatter through the recorded argsort.
    """
    a, pair, att, basis, perm, wq, wk = cache
    dout = np.empty_like(dv)
    np.put_along_axis(dout, perm, dv, axis=1)
    datt = (dout @ basis) * a
    dscores = att * (datt - np.sum(datt * att, axis=1, keepdims=True))
    ds = np.sum(dscores * pair)
    return ds * wk, ds * wq
