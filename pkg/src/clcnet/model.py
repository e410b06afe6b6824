"""The confidence network: sort, map to a fixed dimension, sort again, regress."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tabnet
from .errors import DegenerateInputError, NumericOverflowError
from .mapping import (
    DEFAULT_M,
    DEFAULT_SIGMA,
    MappingParams,
    map_batch_backward,
    map_batch_forward,
    normalize_probs,
)
from .tabnet import RegressorConfig

FORMAT_VERSION = 1


@dataclass
class ConfidenceModel:
    """Mapping parameters, regressor parameters and batch-norm running statistics.

    ``params`` is the flat dict of every learnable array, including the
    mapping's ``map.wq`` / ``map.wk``. ``state`` holds the non-learnable
    batch-norm running statistics.
    """

    m: int
    sigma: float
    config: RegressorConfig
    params: dict
    state: dict
    provenance: dict = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        m: int = DEFAULT_M,
        sigma: float = DEFAULT_SIGMA,
        config: RegressorConfig | None = None,
        seed: int = 0,
    ) -> "ConfidenceModel":
        config = config or RegressorConfig()
        rng = np.random.default_rng(seed)
        mp = MappingParams.init(m, sigma, rng)
        params, state = tabnet.init_regressor(config, m, rng)
        params = {"map.wq": mp.wq, "map.wk": mp.wk, **params}
        return cls(m, float(sigma), config, params, state, {"seed": seed})

    @property
    def mapping(self) -> MappingParams:
        return MappingParams(self.params["map.wq"], self.params["map.wk"], self.sigma)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ConfidenceModel":
        return copy.deepcopy(self)

    def check_finite(self):
        for name, arr in {**self.params, **self.state}.items():
            if not np.all(np.isfinite(arr)):
                raise NumericOverflowError(f"parameter {name} contains non-finite values")

    # -- batched passes -------------------------------------------------

    def forward(self, sorted_probs: np.ndarray, training: bool = False, need_grad: bool = True):
        """Score a ``(B, n)`` batch of descending-sorted probability rows.

        Returns ``(scores, cache)``; the cache feeds :meth:`backward` unless
        ``need_grad`` is false.
        """
        v, map_cache = map_batch_forward(sorted_probs, self.params["map.wq"], self.params["map.wk"], self.sigma)
        y, reg_cache = tabnet.regressor_forward_batch(
            v, self.params, self.state, self.config, training, need_grad
        )
        return y, (map_cache, reg_cache)

    def backward(self, dy: np.ndarray, cache) -> dict:
        map_cache, reg_cache = cache
        dv, grads = tabnet.regressor_backward(dy, reg_cache, self.params, self.config)
        grads["map.wq"], grads["map.wk"] = map_batch_backward(dv, map_cache)
        return grads

    def fold_running_stats(self, cache):
        self.state = tabnet.fold_running_stats(self.state, cache[1])

    def score_batch(self, probs, batch_size: int = 512) -> np.ndarray:
        """Inference-mode confidence for each row of ``probs`` (rows need not be sorted)."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise DegenerateInputError(f"expected (N, n>=2) probabilities, got shape {probs.shape}")
        self.check_finite()
        sorted_rows = -np.sort(-probs, axis=1)
        out = np.empty(probs.shape[0])
        for start in range(0, probs.shape[0], batch_size):
            chunk = sorted_rows[start : start + batch_size]
            out[start : start + batch_size] = self.forward(chunk, need_grad=False)[0]
        return out


def clcnet_forward(p, model: ConfidenceModel) -> float:
    """Confidence that the classification result ``p`` is correct.

    The input is validated as a probability vector, sorted descending, mapped
    to ``model.m`` dimensions and scored by the regressor. Because the first
    thing that happens is a sort, any permutation of ``p`` gives the same score.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    # normalise after sorting so the sum is accumulated in a permutation-free order
    p = normalize_probs(-np.sort(-p))
    return float(model.score_batch(p[None, :])[0])
