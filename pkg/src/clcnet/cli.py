"""Command-line entry point: ``clcnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cascade, fileio
from .cascade import CascadeConfig
from .errors import ClcnetError
from .fileio import load_records, load_weights, save_records, save_weights
from .mapping import normalize_probs
from .model import ConfidenceModel, clcnet_forward
from .records import PairedRunRecords
from .synth import SynthConfig, synth_generate
from .tabnet import RegressorConfig
from .trainer import (
    FoldPlan,
    TrainConfig,
    build_retrain_set,
    build_training_set,
    gradient_check_suite,
    run_fold_protocol,
    train,
    write_training_log,
)

log = logging.getLogger("clcnet")

DATA_DIR_ENV = "CLCNET_DATA_DIR"

FORMATS_HELP = """\
record files (JSON Lines, one sample per line):
  {"model": "b0", "flops_per_image": 390000000.0}    optional header line
  {"id": "img-0001", "label": 3, "probs": [0.01, 0.02, 0.9, 0.07]}
  {"id": "img-0002", "label": 0, "logits": [2.3, -0.1, 0.4, 0.0]}
  ids must be unique, labels are 0-based class indices below the vector
  length, and probability rows summing to within 0.05 of 1 are renormalised
  (others are rejected with the offending line number).

weights files (.npz, uncompressed):
  param/<name>  every learnable array (map.wq, map.wk, regressor weights)
  state/<name>  batch-norm running means and variances
  meta          UTF-8 JSON: format_version, m, sigma, regressor
                hyperparameters and training provenance

relative paths are resolved against $CLCNET_DATA_DIR when it is set.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _path(value: str) -> Path:
    path = Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _paired(shallow, deep) -> PairedRunRecords:
    return PairedRunRecords(load_records(_path(shallow)), load_records(_path(deep)))


def _cascade_cfg(args) -> CascadeConfig:
    return CascadeConfig(
        threshold=getattr(args, "threshold", 0.5),
        include_clcnet_flops=not args.no_clcnet_flops,
        tie_break=args.tie_break,
    )


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience,
        seed=args.seed,
    )


def _model_kwargs(args) -> dict:
    return {
        "m": args.m,
        "sigma": args.sigma,
        "config": RegressorConfig(n_steps=args.n_steps, n_d=args.n_d, n_a=args.n_a),
    }


def _confidence(args):
    if args.weights is None:
        return cascade.maxprob_confidence
    return load_weights(_path(args.weights))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_classes=args.n_classes,
        n_samples=args.n_samples,
        shallow_skill=args.shallow_skill,
        deep_skill=args.deep_skill,
        correlation=args.correlation,
        concentration=args.concentration,
        coupling=args.coupling,
        confounder_fraction=args.confounder_fraction,
        seed=args.seed,
    )
    out = _path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shallow, deep = synth_generate(cfg)
    save_records(shallow, out / "shallow.jsonl")
    save_records(deep, out / "deep.jsonl")
    print(json.dumps({"shallow_accuracy": shallow.accuracy(), "deep_accuracy": deep.accuracy(),
                      "n_samples": cfg.n_samples, "out_dir": str(out)}))
    return 0


def cmd_train(args) -> int:
    records = [load_records(_path(p)) for p in args.records]
    if len(records) == 1:
        data = build_training_set(records[0])
    elif len(records) == 2:
        data = build_retrain_set(*records)
    else:
        raise ClcnetError("train takes one or two record files")
    init = ConfidenceModel.init(seed=args.seed, **_model_kwargs(args))
    result = train(data, _train_cfg(args), init)
    result.model.provenance = {
        **result.model.provenance,
        "sources": [Path(p).name for p in args.records],
    }
    save_weights(result.model, _path(args.out))
    if args.log:
        write_training_log(result.history, _path(args.log))
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_mse": result.best_val_mse,
                      "epochs_run": len(result.history), "weights": str(_path(args.out))}))
    return 0


def cmd_score(args) -> int:
    model = load_weights(_path(args.weights))
    if args.probs is not None:
        values = [float(v) for v in args.probs.split(",")]
        p = normalize_probs(values, is_logits=args.logits)
        print(repr(clcnet_forward(p, model)))
        return 0
    records = load_records(_path(args.records))
    scores = model.score_batch(records.probs)
    for sid, s in zip(records.ids, scores):
        print(json.dumps({"id": sid, "confidence": float(s)}))
    return 0


def cmd_cascade(args) -> int:
    paired = _paired(args.shallow, args.deep)
    point = cascade.evaluate_cascade(paired, _confidence(args), _cascade_cfg(args))
    print(json.dumps(cascade.point_dict(point)))
    return 0


def _verify_curve(paired: PairedRunRecords, curve, inputs, cfg: CascadeConfig) -> list[str]:
    """Post-hoc checks of the curve invariants; returns a list of violations."""
    problems = []
    bound = cascade.oracle_upper_bound(paired)
    last = -1.0
    for pt in curve:
        expect = cascade.average_flops(inputs.f_shallow, inputs.f_deep, pt.n_deep / pt.n_samples, cfg)
        if pt.avg_flops_per_image != expect:
            problems.append(f"flops identity fails at threshold {pt.threshold}")
        if pt.deep_fraction < last:
            problems.append(f"deep_fraction decreases at threshold {pt.threshold}")
        last = pt.deep_fraction
        if pt.top1_accuracy > bound:
            problems.append(f"accuracy above oracle bound at threshold {pt.threshold}")
    if curve[0].threshold == 0.0 and curve[0].top1_accuracy != paired.shallow.accuracy():
        problems.append("threshold 0 does not reproduce shallow-only accuracy")
    if curve[-1].threshold == 1.0:
        s, d = inputs.shallow_conf, inputs.deep_conf
        deep_wins = d >= s if cfg.tie_break == "prefer_deep" else d > s
        pick = np.where(s >= 1.0, inputs.shallow_pred, np.where(deep_wins, inputs.deep_pred, inputs.shallow_pred))
        if curve[-1].top1_accuracy != float(np.mean(pick == inputs.labels)):
            problems.append("threshold 1 does not reproduce the pick-higher-confidence ensemble")
    return problems


def cmd_sweep(args) -> int:
    paired = _paired(args.shallow, args.deep)
    cfg = _cascade_cfg(args)
    grid = cascade.threshold_grid(args.grid_step)
    inputs = cascade.cascade_inputs(paired, _confidence(args))
    curve = cascade.sweep_inputs(inputs, grid, cfg)
    base_inputs = cascade.cascade_inputs(paired, cascade.maxprob_confidence)
    baseline = cascade.sweep_inputs(base_inputs, grid, cfg)
    out = _path(args.out)
    fileio.export_curve(curve, out)
    baseline_path = out.with_name(out.stem + "_maxprob" + out.suffix)
    fileio.export_curve(baseline, baseline_path)
    summary = cascade.summarize(paired, curve, baseline, cfg)
    summary["maxprob_curve"] = str(baseline_path)
    summary_path = _path(args.summary) if args.summary else out.with_suffix(".summary.json")
    fileio.write_json(summary, summary_path)
    if args.verify:
        problems = _verify_curve(paired, curve, inputs, cfg) + _verify_curve(paired, baseline, base_inputs, cfg)
        if problems:
            raise ClcnetError("verify failed: " + "; ".join(problems))
    print(json.dumps({"curve": str(out), "summary": str(summary_path), "points": len(curve),
                      "verified": bool(args.verify)}))
    return 0


def cmd_folds(args) -> int:
    paired = _paired(*args.paired)
    plan = FoldPlan.make(paired.ids, n_folds=args.n_folds, seed=args.seed)
    cfg = _cascade_cfg(args)
    out = _path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(report):
        log.info("fold %d: best epoch %d, %d train / %d val / %d eval",
                 report.fold, report.best_epoch, report.n_train, report.n_val, report.n_eval)

    report = run_fold_protocol(
        paired, plan, _train_cfg(args), cfg, train_source=args.source,
        model_kwargs=_model_kwargs(args), grid_step=args.grid_step, progress=progress,
    )
    folds = []
    for fr in report.folds:
        fileio.export_curve(fr.curve, out / f"fold{fr.fold}_curve.csv")
        fr.model.provenance = {**fr.model.provenance, "fold": fr.fold, "train_source": args.source}
        save_weights(fr.model, out / f"fold{fr.fold}_weights.npz")
        write_training_log(fr.history, out / f"fold{fr.fold}_training.csv")
        folds.append({"fold": fr.fold, "n_train": fr.n_train, "n_val": fr.n_val, "n_eval": fr.n_eval,
                      "best_epoch": fr.best_epoch})
    fileio.export_curve(report.curve, out / "aggregate_curve.csv")
    fileio.export_curve(report.maxprob_curve, out / "aggregate_maxprob_curve.csv")
    summary = cascade.summarize(paired, report.curve, report.maxprob_curve, cfg)
    summary.update({"folds": folds, "auroc_shallow": report.auroc_shallow, "auroc_deep": report.auroc_deep,
                    "train_source": args.source, "seed": args.seed})
    fileio.write_json(summary, out / "summary.json")
    print(json.dumps({"out_dir": str(out), "n_folds": len(folds), "auroc_shallow": report.auroc_shallow}))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_check_suite(n_models=args.n_models, seed=args.seed)
    worst = max(r.max_rel_error for r in results)
    print(json.dumps({"n_models": len(results), "max_rel_error": worst,
                      "n_checked": sum(r.n_checked for r in results), "tolerance": args.tolerance}))
    return 0 if worst <= args.tolerance else 1


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p):
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    p.add_argument("--patience", type=int, default=TrainConfig.early_stop_patience)
    p.add_argument("--m", type=int, default=100, help="mapped dimension")
    p.add_argument("--sigma", type=float, default=0.01, help="width of the mapping columns")
    p.add_argument("--n-steps", type=int, default=RegressorConfig.n_steps)
    p.add_argument("--n-d", type=int, default=RegressorConfig.n_d)
    p.add_argument("--n-a", type=int, default=RegressorConfig.n_a)


def _add_cascade_flags(p):
    p.add_argument("--no-clcnet-flops", action="store_true",
                   help="leave the confidence network's own cost out of the FLOPs average")
    p.add_argument("--tie-break", choices=cascade.TIE_BREAKS, default="prefer_deep")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="clcnet",
        description="Learned classification confidence and two-stage cascades.",
        epilog=FORMATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=FORMATS_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate paired synthetic shallow/deep record files")
    p.add_argument("--out-dir", default=".")
    for flag, default in (("n-classes", 10), ("n-samples", 20_000)):
        p.add_argument(f"--{flag}", type=int, default=default)
    for field_name in ("shallow_skill", "deep_skill", "correlation", "concentration", "coupling",
                       "confounder_fraction"):
        p.add_argument("--" + field_name.replace("_", "-"), type=float,
                       default=getattr(SynthConfig, field_name))

    p = add("train", cmd_train, "train a confidence network on one or two record files")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--log", help="optional per-epoch CSV log")
    _add_training_flags(p)

    p = add("score", cmd_score, "score probability vectors with trained weights")
    p.add_argument("--weights", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--probs", help="comma-separated vector")
    group.add_argument("--records", help="record file; prints one JSON line per sample")
    p.add_argument("--logits", action="store_true", help="--probs holds logits")

    p = add("cascade", cmd_cascade, "evaluate the cascade at one threshold")
    p.add_argument("--shallow", required=True)
    p.add_argument("--deep", required=True)
    p.add_argument("--weights", help="omit to use max-probability confidence")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_cascade_flags(p)

    p = add("sweep", cmd_sweep, "sweep thresholds and write the tradeoff curve")
    p.add_argument("--shallow", required=True)
    p.add_argument("--deep", required=True)
    p.add_argument("--weights", help="omit to use max-probability confidence")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--summary", help="summary JSON (default: next to the curve)")
    p.add_argument("--verify", action="store_true", help="check the curve invariants after writing")
    _add_cascade_flags(p)

    p = add("folds", cmd_folds, "cross-validated training and cascade evaluation")
    p.add_argument("--paired", nargs=2, metavar=("SHALLOW", "DEEP"), required=True)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--source", choices=("shallow", "deep", "both"), default="shallow")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--out-dir", required=True)
    _add_training_flags(p)
    _add_cascade_flags(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the analytic gradients")
    p.add_argument("--n-models", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ClcnetError, ValueError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
