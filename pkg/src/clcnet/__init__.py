"""Learned classification confidence and two-stage model cascades."""

from __future__ import annotations

from .cascade import (
    CascadeConfig,
    TradeoffPoint,
    evaluate_cascade,
    gem_baseline,
    maxprob_confidence,
    oracle_upper_bound,
    sweep_thresholds,
)
from .errors import ClcnetError
from .fileio import export_curve, load_records, load_weights, save_records, save_weights
from .mapping import MappingParams, map_to_fixed_dim, normalize_probs, sort_desc
from .model import ConfidenceModel, clcnet_forward
from .records import ModelRunRecords, PairedRunRecords
from .sparsemax import sparsemax
from .synth import SynthConfig, synth_generate
from .tabnet import RegressorConfig
from .trainer import FoldPlan, TrainConfig, run_fold_protocol, train

__all__ = [
    "CascadeConfig",
    "ClcnetError",
    "ConfidenceModel",
    "FoldPlan",
    "MappingParams",
    "ModelRunRecords",
    "PairedRunRecords",
    "RegressorConfig",
    "SynthConfig",
    "TradeoffPoint",
    "TrainConfig",
    "clcnet_forward",
    "evaluate_cascade",
    "export_curve",
    "gem_baseline",
    "load_records",
    "load_weights",
    "map_to_fixed_dim",
    "maxprob_confidence",
    "normalize_probs",
    "oracle_upper_bound",
    "run_fold_protocol",
    "save_records",
    "save_weights",
    "sort_desc",
    "sparsemax",
    "sweep_thresholds",
    "synth_generate",
    "train",
]
