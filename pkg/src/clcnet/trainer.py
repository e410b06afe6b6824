"""Dataset construction, training loop, gradient checking and fold protocols."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import CascadeConfig, CascadeInputs, sweep_inputs, threshold_grid
from .errors import (
    ClcnetError,
    EmptyInputError,
    FoldSizeError,
    NumericOverflowError,
    PairedRecordError,
    TrainingDivergedError,
)
from .metrics import auroc
from .model import ConfidenceModel
from .records import ModelRunRecords, PairedRunRecords
from .tabnet import RegressorConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledSample:
    probs: np.ndarray
    label: float
    source_model: str


@dataclass
class LabeledSamples:
    """Column-oriented set of labelled classification results.

    ``groups`` holds the underlying sample id; two rows produced by different
    models for the same image share a group.
    """

    probs: np.ndarray
    labels: np.ndarray
    sources: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.sources = np.asarray(self.sources, dtype=object)
        self.groups = np.asarray(self.groups, dtype=object)
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("labels must be exactly 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.probs[i], float(self.labels[i]), str(self.sources[i]))

    def subset(self, index) -> "LabeledSamples":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSamples(self.probs[index], self.labels[index], self.sources[index], self.groups[index])

    def sorted_probs(self) -> np.ndarray:
        return -np.sort(-self.probs, axis=1)


def build_training_set(records: ModelRunRecords) -> LabeledSamples:
    """Label each record 1 when the model's top-1 prediction is right, else 0."""
    if len(records) == 0:
        raise EmptyInputError("no records to build a training set from")
    return LabeledSamples(
        records.probs,
        records.correct.astype(np.float64),
        np.full(len(records), records.name, dtype=object),
        np.asarray(records.ids, dtype=object),
    )


def build_retrain_set(shallow: ModelRunRecords, deep: ModelRunRecords) -> LabeledSamples:
    """Both models' outputs stacked; rows keep their image id as group."""
    if set(shallow.ids) != set(deep.ids) or len(shallow) != len(deep):
        raise PairedRecordError("shallow and deep records cover different sample ids")
    a, b = build_training_set(shallow), build_training_set(deep)
    return LabeledSamples(
        np.vstack([a.probs, b.probs]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.sources, b.sources]),
        np.concatenate([a.groups, b.groups]),
    )


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 200
    early_stop_patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


class Adam:
    def __init__(self, params: dict, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: ConfidenceModel
    history: list  # (epoch, train_mse, val_mse)
    best_epoch: int
    best_val_mse: float


def mse(model: ConfidenceModel, data: LabeledSamples, batch_size: int = 512) -> float:
    sorted_probs = data.sorted_probs()
    total = 0.0
    for start in range(0, len(data), batch_size):
        y, _ = model.forward(sorted_probs[start : start + batch_size], need_grad=False)
        total += float(np.sum((y - data.labels[start : start + batch_size]) ** 2))
    return total / len(data)


def split_by_group(data: LabeledSamples, val_fraction: float, seed: int):
    groups = np.unique(data.groups)
    rng = np.random.default_rng(seed)
    shuffled = groups[rng.permutation(len(groups))]
    n_train = int(round((1.0 - val_fraction) * len(groups)))
    train_groups = set(shuffled[:n_train])
    in_train = np.array([g in train_groups for g in data.groups])
    return data.subset(np.flatnonzero(in_train)), data.subset(np.flatnonzero(~in_train))


def train(
    data: LabeledSamples,
    cfg: TrainConfig = TrainConfig(),
    init: ConfidenceModel | None = None,
    val: LabeledSamples | None = None,
) -> TrainResult:
    """Minimise MSE between the confidence score and the 0/1 labels with Adam.

    Validation MSE (inference-mode batch norm) is measured after every epoch;
    training stops after ``early_stop_patience`` epochs without improvement
    and the best checkpoint is returned. When ``val`` is omitted a
    ``val_fraction`` share of sample groups is held out.
    """
    if len(data) == 0:
        raise EmptyInputError("empty training set")
    if val is None:
        data, val = split_by_group(data, cfg.val_fraction, cfg.seed)
    if len(data) == 0 or len(val) == 0:
        raise EmptyInputError("training or validation split is empty")
    model = (init or ConfidenceModel.init(seed=cfg.seed)).copy()
    model.check_finite()
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    sorted_probs = data.sorted_probs()
    labels = data.labels

    best = model.copy()
    best_val = mse(model, val)
    best_epoch = 0
    history = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        loss_sum, seen = 0.0, 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs two rows
                y, cache = model.forward(sorted_probs[idx], training=True)
                err = y - labels[idx]
                loss_sum += float(err @ err)
                seen += len(idx)
                grads = model.backward(2.0 * err / len(idx), cache)
                opt.step(model.params, grads)
                model.fold_running_stats(cache)
            train_mse = loss_sum / max(seen, 1)
            val_mse = mse(model, val)
        except (NumericOverflowError, FloatingPointError) as exc:
            raise TrainingDivergedError(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDivergedError(epoch)
        history.append((epoch, train_mse, val_mse))
        log.debug("epoch %d train_mse %.6f val_mse %.6f", epoch, train_mse, val_mse)
        if val_mse < best_val:
            best, best_val, best_epoch, stale = model.copy(), val_mse, epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    best.provenance = {**best.provenance, "seed": cfg.seed, "best_epoch": best_epoch}
    return TrainResult(best, history, best_epoch, best_val)


def write_training_log(history, path) -> None:
    from .fileio import atomic_write

    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in history:
            writer.writerow([epoch, repr(float(tr)), repr(float(va))])


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple | None  # (param name, index, analytic, numeric)
    n_checked: int


def _loss(model, sorted_probs, labels, training):
    y, _ = model.forward(sorted_probs, training, need_grad=False)
    return np.mean((y - labels) ** 2)


def gradient_check(
    model: ConfidenceModel,
    sample,
    labels=None,
    training: bool = False,
    step: float = 1e-5,
    min_grad: float = 1e-8,
) -> GradCheckResult:
    """Compare analytic MSE gradients with central finite differences.

    ``sample`` is a LabeledSample, a single probability vector (with
    ``labels`` a scalar) or a ``(B, n)`` batch. The reverse-mode gradients
    are computed in float64. The finite differences perturb each float64
    parameter by ``+/- step`` and evaluate the loss in extended precision
    (``np.longdouble``), which keeps round-off far below the tolerance even
    for gradients near ``min_grad``. Only entries with ``|grad| > min_grad``
    are scored; the relative error is ``|a - n| / max(|a|, |n|)``.
    """
    if isinstance(sample, LabeledSample):
        probs, labels = sample.probs, sample.label
    else:
        probs = sample
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.float64), (probs.shape[0],)).copy()
    sorted_probs = -np.sort(-probs, axis=1)

    y, cache = model.forward(sorted_probs, training)
    grads = model.backward(2.0 * (y - labels) / len(labels), cache)

    wide = model.copy()
    wide.params = {k: v.astype(np.longdouble) for k, v in model.params.items()}
    wide.state = {k: v.astype(np.longdouble) for k, v in model.state.items()}
    wide_probs = sorted_probs.astype(np.longdouble)
    wide_labels = labels.astype(np.longdouble)
    h = np.longdouble(step)

    worst, worst_at, checked = 0.0, None, 0
    for name, arr in wide.params.items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            analytic = float(g[idx])
            if abs(analytic) <= min_grad:
                continue
            old = arr[idx]
            arr[idx] = old + h
            up = _loss(wide, wide_probs, wide_labels, training)
            arr[idx] = old - h
            down = _loss(wide, wide_probs, wide_labels, training)
            arr[idx] = old
            numeric = float((up - down) / (2 * h))
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (name, idx, analytic, numeric)
    return GradCheckResult(worst, worst_at, checked)


def warm_up_batchnorm(model: ConfidenceModel, probs, passes: int = 30, batch_size: int = 64, seed: int = 0):
    """Fill batch-norm running statistics from training-mode passes (no parameter updates)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    sorted_probs = -np.sort(-probs, axis=1)
    rng = np.random.default_rng(seed)
    for _ in range(passes):
        idx = rng.choice(len(sorted_probs), size=min(batch_size, len(sorted_probs)), replace=False)
        _, cache = model.forward(sorted_probs[idx], training=True, need_grad=False)
        model.fold_running_stats(cache)
    return model


def gradient_check_suite(
    n_models: int = 20,
    seed: int = 0,
    n_classes: int = 6,
    m: int = 16,
    sigma: float = 0.05,
    n_steps: int = 2,
) -> list[GradCheckResult]:
    """Gradient-check small randomly initialised models, one labeled sample each.

    Each model first has its batch-norm statistics warmed up on random
    inputs so running statistics reflect real activations, then is checked
    in inference mode on a single sample.
    """
    config = RegressorConfig(n_steps=n_steps, n_d=4, n_a=4, attn_width=4)
    results = []
    for k in range(n_models):
        rng = np.random.default_rng([seed, k])
        model = ConfidenceModel.init(m=m, sigma=sigma, config=config, seed=int(rng.integers(2**31)))
        probs = rng.dirichlet(np.full(n_classes, 0.5))
        label = float(rng.integers(0, 2))
        warm_up_batchnorm(model, rng.dirichlet(np.full(n_classes, 0.5), size=256), seed=k)
        results.append(gradient_check(model, LabeledSample(probs, label, "synthetic")))
    return results


# ---------------------------------------------------------------------------
# fold protocol


@dataclass
class FoldPlan:
    """Assignment of every sample id to one evaluation fold, plus the inner train/val split rule."""

    ids: np.ndarray
    assignments: np.ndarray
    n_folds: int = 5
    inner_train_fraction: float = 0.8
    seed: int = 0

    @classmethod
    def make(cls, ids, n_folds: int = 5, inner_train_fraction: float = 0.8, seed: int = 0) -> "FoldPlan":
        if n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if not 0 < inner_train_fraction < 1:
            raise ValueError("inner_train_fraction must be in (0, 1)")
        ids = np.asarray([str(i) for i in ids], dtype=object)
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique")
        order = np.random.default_rng(seed).permutation(len(ids))
        assignments = np.empty(len(ids), dtype=np.int64)
        assignments[order] = np.arange(len(ids)) % n_folds
        return cls(ids, assignments, n_folds, inner_train_fraction, seed)

    def eval_ids(self, fold: int) -> np.ndarray:
        return self.ids[self.assignments == fold]

    def train_val_ids(self, fold: int):
        rest = self.ids[self.assignments != fold]
        order = np.random.default_rng([self.seed, fold]).permutation(len(rest))
        n_train = int(round(self.inner_train_fraction * len(rest)))
        return rest[order[:n_train]], rest[order[n_train:]]


@dataclass
class FoldReport:
    fold: int
    n_train: int
    n_val: int
    n_eval: int
    best_epoch: int
    history: list
    curve: list
    model: ConfidenceModel = field(repr=False)


@dataclass
class FoldProtocolReport:
    folds: list
    curve: list
    maxprob_curve: list
    inputs: CascadeInputs = field(repr=False)
    auroc_shallow: float = float("nan")
    auroc_deep: float = float("nan")


TRAIN_SOURCES = ("shallow", "deep", "both")


def _training_rows(paired: PairedRunRecords, source: str) -> LabeledSamples:
    if source == "shallow":
        return build_training_set(paired.shallow)
    if source == "deep":
        return build_training_set(paired.deep)
    return build_retrain_set(paired.shallow, paired.deep)


def run_fold_protocol(
    paired: PairedRunRecords,
    plan: FoldPlan,
    cfg: TrainConfig = TrainConfig(),
    cascade_cfg: CascadeConfig | None = None,
    train_source: str = "shallow",
    model_kwargs: dict | None = None,
    grid_step: float = 0.01,
    progress=None,
) -> FoldProtocolReport:
    """Cross-validated training and cascade evaluation.

    For each fold the confidence network is trained on ``inner_train_fraction``
    of the other folds (the rest validates early stopping) and the cascade is
    evaluated on the held-out fold. ``train_source="both"`` stacks shallow and
    deep outputs (two rows per image, always on the same side of every split).
    The aggregate curve pools the held-out scores of all folds, so its
    accuracy is the fold-size-weighted mean.
    """
    if train_source not in TRAIN_SOURCES:
        raise ValueError(f"train_source must be one of {TRAIN_SOURCES}")
    cascade_cfg = cascade_cfg or CascadeConfig()
    if set(plan.ids) != set(paired.ids) or len(plan.ids) != len(paired):
        raise PairedRecordError("fold plan ids do not match the paired records")
    position = {sid: i for i, sid in enumerate(paired.ids)}
    rows = _training_rows(paired, train_source)
    rows_by_group: dict[str, list[int]] = {}
    for i, g in enumerate(rows.groups):
        rows_by_group.setdefault(g, []).append(i)
    grid = threshold_grid(grid_step)
    model_kwargs = model_kwargs or {}

    folds, pooled = [], None
    for fold in range(plan.n_folds):
        eval_ids = plan.eval_ids(fold)
        train_ids, val_ids = plan.train_val_ids(fold)
        if len(eval_ids) == 0 or len(train_ids) < 2 or len(val_ids) == 0:
            raise FoldSizeError(
                f"fold {fold}: {len(train_ids)} train / {len(val_ids)} val / {len(eval_ids)} eval ids is too few"
            )
        held = set(eval_ids)
        if held & set(train_ids) or held & set(val_ids) or set(train_ids) & set(val_ids):
            raise ClcnetError(f"fold {fold}: id leakage between train/val/eval")

        def pick(ids):
            return rows.subset([i for sid in ids for i in rows_by_group[sid]])

        fold_cfg = replace(cfg, seed=cfg.seed + fold)
        init = ConfidenceModel.init(seed=fold_cfg.seed, **model_kwargs)
        result = train(pick(train_ids), fold_cfg, init, val=pick(val_ids))
        eval_paired = paired.subset([position[sid] for sid in eval_ids])
        f_s, f_d = eval_paired.shallow.flops_per_image, eval_paired.deep.flops_per_image
        if f_s is None or f_d is None:
            raise ClcnetError("both record sets need flops_per_image for cascade evaluation")
        inputs = CascadeInputs(
            result.model.score_batch(eval_paired.shallow.probs),
            result.model.score_batch(eval_paired.deep.probs),
            eval_paired.shallow.predictions,
            eval_paired.deep.predictions,
            eval_paired.labels,
            f_s,
            f_d,
        )
        pooled = inputs if pooled is None else pooled.concat(inputs)
        report = FoldReport(
            fold, len(train_ids), len(val_ids), len(eval_ids), result.best_epoch, result.history,
            sweep_inputs(inputs, grid, cascade_cfg), result.model,
        )
        folds.append(report)
        if progress is not None:
            progress(report)

    order = np.concatenate([[position[sid] for sid in plan.eval_ids(f)] for f in range(plan.n_folds)])
    ordered = paired.subset(order)
    maxprob_inputs = CascadeInputs(
        np.max(ordered.shallow.probs, axis=1),
        np.max(ordered.deep.probs, axis=1),
        pooled.shallow_pred,
        pooled.deep_pred,
        pooled.labels,
        pooled.f_shallow,
        pooled.f_deep,
    )
    return FoldProtocolReport(
        folds,
        sweep_inputs(pooled, grid, cascade_cfg),
        sweep_inputs(maxprob_inputs, grid, cascade_cfg),
        pooled,
        auroc(pooled.shallow_conf, pooled.shallow_pred == pooled.labels),
        auroc(pooled.deep_conf, pooled.deep_pred == pooled.labels),
    )
