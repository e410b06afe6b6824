"""Two-stage cascade: threshold routing, FLOPs accounting and baselines.

A sample is first classified by the shallow model and scored by a
confidence function. If the score reaches the threshold the shallow
prediction is accepted; otherwise the deep model runs too, its output is
scored, and whichever prediction has the higher confidence wins.

Average FLOPs per image follow directly from the fraction of samples that
reach the deep model::

    avg = F_s + F_clc + deep_fraction * (F_d + F_clc)     (CLCNet cost counted)
    avg = F_s + deep_fraction * F_d                       (CLCNet cost ignored)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClcnetError, MissingRecordError
from .records import PairedRunRecords

CLCNET_FLOPS = 2.7e6
TIE_BREAKS = ("prefer_deep", "prefer_shallow")


@dataclass(frozen=True)
class CascadeConfig:
    threshold: float = 0.5
    clcnet_flops: float = CLCNET_FLOPS
    include_clcnet_flops: bool = True
    tie_break: str = "prefer_deep"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}, got {self.tie_break!r}")
        if self.clcnet_flops < 0:
            raise ValueError("clcnet_flops must be >= 0")

    def with_threshold(self, threshold: float) -> "CascadeConfig":
        return CascadeConfig(threshold, self.clcnet_flops, self.include_clcnet_flops, self.tie_break)


@dataclass(frozen=True)
class Decision:
    accepted_pred: int
    used_deep: bool


@dataclass(frozen=True)
class TradeoffPoint:
    threshold: float
    top1_accuracy: float
    avg_flops_per_image: float
    deep_fraction: float
    n_samples: int = 0
    n_correct: int = 0
    n_deep: int = 0


@dataclass(frozen=True)
class GemResult:
    accuracy: float
    avg_flops: float


def route(shallow_conf, deep_conf, shallow_pred, deep_pred, cfg: CascadeConfig) -> Decision:
    """Route one sample. ``deep_conf`` is only consulted when the shallow score misses the threshold."""
    if shallow_conf >= cfg.threshold:
        return Decision(int(shallow_pred), False)
    if deep_conf is None:
        raise MissingRecordError("deep confidence required: shallow confidence is below threshold")
    if deep_conf > shallow_conf:
        return Decision(int(deep_pred), True)
    if deep_conf == shallow_conf and cfg.tie_break == "prefer_deep":
        return Decision(int(deep_pred), True)
    return Decision(int(shallow_pred), True)


def average_flops(f_shallow: float, f_deep: float, deep_fraction: float, cfg: CascadeConfig) -> float:
    if cfg.include_clcnet_flops:
        return f_shallow + cfg.clcnet_flops + deep_fraction * (f_deep + cfg.clcnet_flops)
    return f_shallow + deep_fraction * f_deep


def implied_deep_fraction(avg: float, f_shallow: float, f_deep: float, cfg: CascadeConfig) -> float:
    """Invert :func:`average_flops` for the share of samples sent to the deep model."""
    if cfg.include_clcnet_flops:
        return (avg - f_shallow - cfg.clcnet_flops) / (f_deep + cfg.clcnet_flops)
    return (avg - f_shallow) / f_deep


def _require_flops(paired: PairedRunRecords):
    f_s, f_d = paired.shallow.flops_per_image, paired.deep.flops_per_image
    if f_s is None or f_d is None:
        raise ClcnetError("both record sets need flops_per_image for cascade evaluation")
    return f_s, f_d


@dataclass
class CascadeInputs:
    """Per-sample arrays the cascade needs; built once, reused for every threshold."""

    shallow_conf: np.ndarray
    deep_conf: np.ndarray
    shallow_pred: np.ndarray
    deep_pred: np.ndarray
    labels: np.ndarray
    f_shallow: float
    f_deep: float

    def __len__(self) -> int:
        return len(self.labels)

    def concat(self, other: "CascadeInputs") -> "CascadeInputs":
        return CascadeInputs(
            *(np.concatenate([getattr(self, k), getattr(other, k)]) for k in
              ("shallow_conf", "deep_conf", "shallow_pred", "deep_pred", "labels")),
            self.f_shallow,
            self.f_deep,
        )


def confidence_scores(probs: np.ndarray, confidence) -> np.ndarray:
    """Apply a confidence source to every row: a ConfidenceModel or a per-vector callable."""
    if hasattr(confidence, "score_batch"):
        return confidence.score_batch(probs)
    if confidence is maxprob_confidence:
        return np.max(probs, axis=1)
    return np.array([confidence(p) for p in probs], dtype=np.float64)


def cascade_inputs(paired: PairedRunRecords, confidence) -> CascadeInputs:
    f_s, f_d = _require_flops(paired)
    return CascadeInputs(
        confidence_scores(paired.shallow.probs, confidence),
        confidence_scores(paired.deep.probs, confidence),
        paired.shallow.predictions,
        paired.deep.predictions,
        paired.labels,
        f_s,
        f_d,
    )


def evaluate_inputs(inputs: CascadeInputs, cfg: CascadeConfig) -> TradeoffPoint:
    """Vectorised :func:`route` over all samples, aggregated to one point."""
    if len(inputs) == 0:
        raise ClcnetError("cannot evaluate a cascade on zero samples")
    s_conf, d_conf = inputs.shallow_conf, inputs.deep_conf
    used_deep = ~(s_conf >= cfg.threshold)
    if cfg.tie_break == "prefer_deep":
        deep_wins = d_conf >= s_conf
    else:
        deep_wins = d_conf > s_conf
    pred = np.where(used_deep & deep_wins, inputs.deep_pred, inputs.shallow_pred)
    n = len(inputs)
    n_correct = int(np.sum(pred == inputs.labels))
    n_deep = int(np.sum(used_deep))
    frac = n_deep / n
    return TradeoffPoint(
        threshold=float(cfg.threshold),
        top1_accuracy=n_correct / n,
        avg_flops_per_image=average_flops(inputs.f_shallow, inputs.f_deep, frac, cfg),
        deep_fraction=frac,
        n_samples=n,
        n_correct=n_correct,
        n_deep=n_deep,
    )


def evaluate_cascade(paired: PairedRunRecords, model, cfg: CascadeConfig) -> TradeoffPoint:
    """Evaluate the cascade at ``cfg.threshold`` using ``model`` (or any confidence callable)."""
    return evaluate_inputs(cascade_inputs(paired, model), cfg)


def threshold_grid(step: float = 0.01) -> np.ndarray:
    if not 0 < step <= 1:
        raise ValueError(f"grid step must be in (0, 1], got {step}")
    count = int(round(1.0 / step))
    if not np.isclose(count * step, 1.0):
        raise ValueError(f"grid step {step} does not divide [0, 1]")
    return np.round(np.linspace(0.0, 1.0, count + 1), 12)


def sweep_inputs(inputs: CascadeInputs, grid=None, cfg: CascadeConfig | None = None) -> list[TradeoffPoint]:
    cfg = cfg or CascadeConfig()
    grid = threshold_grid() if grid is None else grid
    return [evaluate_inputs(inputs, cfg.with_threshold(float(t))) for t in grid]


def sweep_thresholds(paired: PairedRunRecords, model, grid_step: float = 0.01, cfg: CascadeConfig | None = None):
    """One TradeoffPoint per grid threshold over ``[0, 1]``."""
    return sweep_inputs(cascade_inputs(paired, model), threshold_grid(grid_step), cfg)


def find_threshold(curve, min_accuracy: float | None = None, max_avg_flops: float | None = None):
    """Pick the grid threshold that just meets an accuracy or FLOPs requirement.

    With ``min_accuracy`` the cheapest qualifying point wins; with
    ``max_avg_flops`` the most accurate affordable point wins. Ties go to the
    lower threshold. Returns ``None`` when nothing qualifies.
    """
    if (min_accuracy is None) == (max_avg_flops is None):
        raise ValueError("give exactly one of min_accuracy or max_avg_flops")
    curve = list(curve)
    if not curve:
        raise ValueError("empty curve")
    if min_accuracy is not None:
        ok = [p for p in curve if p.top1_accuracy >= min_accuracy]
        key = lambda p: (p.avg_flops_per_image, p.threshold)  # noqa: E731
    else:
        ok = [p for p in curve if p.avg_flops_per_image <= max_avg_flops]
        key = lambda p: (-p.top1_accuracy, p.avg_flops_per_image, p.threshold)  # noqa: E731
    if not ok:
        return None
    return min(ok, key=key).threshold


# ---------------------------------------------------------------------------
# baselines


def maxprob_confidence(p) -> float:
    """Highest class probability used directly as the confidence score."""
    return float(np.max(np.asarray(p, dtype=np.float64)))


def gem_baseline(paired: PairedRunRecords) -> GemResult:
    """Ensemble averaging: run both models on every sample and take argmax of the summed outputs."""
    f_s, f_d = _require_flops(paired)
    pred = np.argmax(paired.shallow.probs + paired.deep.probs, axis=1)
    return GemResult(float(np.mean(pred == paired.labels)), f_s + f_d)


def oracle_upper_bound(paired: PairedRunRecords) -> float:
    """Share of samples that at least one of the two models classifies correctly."""
    return float(np.mean(paired.shallow.correct | paired.deep.correct))


def summarize(paired: PairedRunRecords, curve, baseline_curve=None, cfg: CascadeConfig | None = None) -> dict:
    """Endpoints, ceiling and baselines for a sweep, as a JSON-ready dict."""
    cfg = cfg or CascadeConfig()
    gem = gem_baseline(paired)
    deep_acc = paired.deep.accuracy()
    summary = {
        "n_samples": len(paired),
        "shallow": {"name": paired.shallow.name, "accuracy": paired.shallow.accuracy(),
                    "flops_per_image": paired.shallow.flops_per_image},
        "deep": {"name": paired.deep.name, "accuracy": deep_acc,
                 "flops_per_image": paired.deep.flops_per_image},
        "oracle_upper_bound": oracle_upper_bound(paired),
        "gem": {"accuracy": gem.accuracy, "avg_flops": gem.avg_flops},
        "include_clcnet_flops": cfg.include_clcnet_flops,
        "clcnet_flops": cfg.clcnet_flops,
        "endpoints": {"threshold_0": point_dict(curve[0]), "threshold_1": point_dict(curve[-1])},
        "best_accuracy": point_dict(max(curve, key=lambda p: (p.top1_accuracy, -p.avg_flops_per_image))),
        "match_deep_accuracy_threshold": find_threshold(curve, min_accuracy=deep_acc),
    }
    if baseline_curve is not None:
        summary["maxprob_best_accuracy"] = point_dict(
            max(baseline_curve, key=lambda p: (p.top1_accuracy, -p.avg_flops_per_image))
        )
        summary["maxprob_match_deep_accuracy_threshold"] = find_threshold(baseline_curve, min_accuracy=deep_acc)
    return summary


def point_dict(p: TradeoffPoint) -> dict:
    return {
        "threshold": p.threshold,
        "top1_accuracy": p.top1_accuracy,
        "avg_flops_per_image": p.avg_flops_per_image,
        "deep_fraction": p.deep_fraction,
    }

