"""Synthetic paired classifier outputs for desk-scale runs.

Each sample gets a shared difficulty ``d ~ N(0, 1)``. Model ``k`` has a
latent ``u_k = sqrt(c) d + sqrt(1 - c) e_k`` and is correct exactly when
``u_k < Phi^-1(skill_k)``, so its expected accuracy equals its skill and the
two models' mistakes overlap according to ``c`` (the correlation).

Probability vectors come from logits. The non-predicted classes get
``N(0, 1)`` logits; the predicted class sits above the largest of them by a
margin ``softplus(concentration * s)`` where ``s`` mixes the distance to the
correctness threshold with independent noise (``coupling`` sets the mix).
Larger margins mean more peaked vectors, and they are more common among
correct predictions, so confidence is learnable from the vector alone.

A ``confounder_fraction`` of the wrong predictions is rewritten into the
"strong runner-up" pattern: top-1 mass ``p`` in ``[0.5, 0.8]``, the true
class holding most of the remainder and the other classes almost nothing.
Max-probability cannot tell these apart from a correct prediction with the
same ``p`` and a flat tail, while the shape of the full vector can.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .mapping import softmax
from .records import ModelRunRecords

DEFAULT_SHALLOW_FLOPS = 0.39e9
DEFAULT_DEEP_FLOPS = 4.2e9


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 10
    n_samples: int = 20_000
    shallow_skill: float = 0.75
    deep_skill: float = 0.85
    correlation: float = 0.7
    concentration: float = 2.0
    seed: int = 0
    coupling: float = 0.8
    confounder_fraction: float = 0.3
    shallow_flops: float = DEFAULT_SHALLOW_FLOPS
    deep_flops: float = DEFAULT_DEEP_FLOPS

    def __post_init__(self):
        if self.n_classes < 3:
            raise ValueError("n_classes must be >= 3 (the confounder pattern needs a third class)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.shallow_skill <= self.deep_skill < 1.0:
            raise ValueError(
                f"need 0 < shallow_skill <= deep_skill < 1, got {self.shallow_skill}, {self.deep_skill}"
            )
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must be in [0, 1]")
        if not self.concentration > 0:
            raise ValueError("concentration must be > 0")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must be in [0, 1]")
        if not 0.0 <= self.confounder_fraction <= 1.0:
            raise ValueError("confounder_fraction must be in [0, 1]")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _model_outputs(rng, cfg: SynthConfig, difficulty, labels, skill):
    n, k = cfg.n_samples, cfg.n_classes
    c = cfg.correlation
    latent = np.sqrt(c) * difficulty + np.sqrt(1.0 - c) * rng.standard_normal(n)
    theta = ndtri(skill)
    correct = latent < theta

    # a wrong prediction lands on a uniformly chosen other class
    offset = rng.integers(1, k, size=n)
    pred = np.where(correct, labels, (labels + offset) % k)

    logits = rng.standard_normal((n, k))
    rows = np.arange(n)
    logits[rows, pred] = -np.inf
    top_other = logits.max(axis=1)
    signal = cfg.coupling * (theta - latent) + np.sqrt(1.0 - cfg.coupling**2) * rng.standard_normal(n)
    logits[rows, pred] = top_other + _softplus(cfg.concentration * signal)
    probs = softmax(logits)

    wrong = np.flatnonzero(~correct)
    pick = wrong[rng.random(wrong.size) < cfg.confounder_fraction]
    if pick.size:
        probs[pick] = confounder_vectors(rng, pred[pick], labels[pick], k)
    return probs


def confounder_vectors(rng, top, runner_up, n_classes: int) -> np.ndarray:
    """Vectors with mass ``p ~ U(0.5, 0.8)`` on ``top`` and most of the rest on ``runner_up``."""
    top = np.asarray(top)
    count = top.size
    p = rng.uniform(0.5, 0.8, size=count)
    share = rng.uniform(0.85, 0.98, size=count)
    rest = rng.dirichlet(np.ones(n_classes - 2), size=count) * ((1.0 - p) * (1.0 - share))[:, None]
    out = np.empty((count, n_classes))
    for i in range(count):
        others = [c for c in range(n_classes) if c != top[i] and c != runner_up[i]]
        out[i, others] = rest[i]
    rows = np.arange(count)
    out[rows, top] = p
    out[rows, runner_up] = (1.0 - p) * share
    return out


def synth_generate(cfg: SynthConfig) -> tuple[ModelRunRecords, ModelRunRecords]:
    """Return ``(shallow, deep)`` records over the same ids and labels."""
    rng = np.random.default_rng(cfg.seed)
    difficulty = rng.standard_normal(cfg.n_samples)
    labels = rng.integers(0, cfg.n_classes, size=cfg.n_samples)
    shallow = _model_outputs(rng, cfg, difficulty, labels, cfg.shallow_skill)
    deep = _model_outputs(rng, cfg, difficulty, labels, cfg.deep_skill)
    width = max(6, len(str(cfg.n_samples - 1)))
    ids = [f"s{i:0{width}d}" for i in range(cfg.n_samples)]
    meta = {"generator": "synth", "seed": cfg.seed}
    return (
        ModelRunRecords("shallow", cfg.shallow_flops, ids, labels, shallow, dict(meta)),
        ModelRunRecords("deep", cfg.deep_flops, list(ids), labels.copy(), deep, dict(meta)),
    )


def constructed_pairs(n_pairs: int, n_classes: int = 10, seed: int = 0):
    """Pairs sharing the same top-1 mass: a flat tail versus a strong runner-up.

    Returns ``(flat, runner_up)`` arrays of shape ``(n_pairs, n_classes)``.
    Max-probability scores both members of each pair identically.
    """
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.5, 0.8, size=n_pairs)
    flat = np.empty((n_pairs, n_classes))
    flat[:, 0] = p
    flat[:, 1:] = ((1.0 - p) / (n_classes - 1))[:, None]
    share = rng.uniform(0.9, 0.99, size=n_pairs)
    strong = np.empty((n_pairs, n_classes))
    strong[:, 0] = p
    strong[:, 1] = (1.0 - p) * share
    strong[:, 2:] = ((1.0 - p) * (1.0 - share) / (n_classes - 2))[:, None]
    return flat, strong
