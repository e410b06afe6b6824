"""Record files, weights files and curve CSVs.

Record files are JSON Lines, one sample per line::

    {"model": "effnet-b0", "flops_per_image": 390000000.0}      # optional header
    {"id": "img-0001", "label": 3, "probs": [0.01, 0.02, 0.9, ...]}
    {"id": "img-0002", "label": 7, "logits": [1.3, -0.2, 4.1, ...]}

Weights files are uncompressed ``.npz`` archives holding every parameter
(``param/<name>``), every batch-norm running statistic (``state/<name>``)
and a JSON ``meta`` blob with the format version, the mapping and regressor
hyperparameters and training provenance.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
import zipfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import tabnet
from .cascade import TradeoffPoint
from .errors import (
    ClcnetError,
    DuplicateIdError,
    EmptyInputError,
    LabelError,
    RecordParseError,
    WeightsCorruptionError,
    WeightsVersionError,
)
from .mapping import softmax
from .model import FORMAT_VERSION, ConfidenceModel
from .records import ModelRunRecords
from .tabnet import RegressorConfig

log = logging.getLogger(__name__)

PROB_SUM_TOLERANCE = 0.05
EXACT_SUM_SLACK = 1e-12
CURVE_COLUMNS = ("threshold", "top1_accuracy", "avg_flops_per_image", "deep_fraction")


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temporary sibling file and rename it over ``path`` on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": "", "encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# records


def _parse_vector(values, lineno, key):
    if not isinstance(values, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
    ):
        raise RecordParseError(lineno, f"'{key}' must be a list of numbers")
    vec = np.asarray(values, dtype=np.float64)
    if vec.shape[0] < 2:
        raise RecordParseError(lineno, f"'{key}' needs at least 2 entries")
    if not np.all(np.isfinite(vec)):
        raise RecordParseError(lineno, f"'{key}' contains non-finite values")
    return vec


def _parse_probs(entry: dict, lineno: int) -> np.ndarray:
    if ("probs" in entry) == ("logits" in entry):
        raise RecordParseError(lineno, "exactly one of 'probs' or 'logits' is required")
    if "logits" in entry:
        return softmax(_parse_vector(entry["logits"], lineno, "logits"))
    p = _parse_vector(entry["probs"], lineno, "probs")
    if np.any(p < 0):
        raise RecordParseError(lineno, "negative probability")
    total = p.sum()
    if abs(total - 1.0) > PROB_SUM_TOLERANCE:
        raise RecordParseError(lineno, f"probabilities sum to {total:.6g}, outside 1 +/- {PROB_SUM_TOLERANCE}")
    # rows already normalised up to float round-off are kept bit-for-bit so
    # that save/load round-trips are lossless
    if abs(total - 1.0) > EXACT_SUM_SLACK:
        log.warning("line %d: probabilities sum to %.6g; renormalised", lineno, total)
        p = p / total
    return p


def load_records(path, name: str | None = None, flops_per_image: float | None = None) -> ModelRunRecords:
    """Read and validate a JSON Lines record file.

    Header values (``model``, ``flops_per_image``) are used unless overridden
    by the arguments. Every validation failure names the offending line.
    """
    path = Path(path)
    header: dict = {}
    ids, labels, rows = [], [], []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(entry, dict):
                raise RecordParseError(lineno, "expected a JSON object")
            if "id" not in entry:
                if "model" in entry and not ids and not header:
                    header = entry
                    continue
                raise RecordParseError(lineno, "missing 'id'")
            sid = str(entry["id"])
            if sid in seen:
                raise DuplicateIdError(lineno, f"duplicate id {sid!r} (first seen on line {seen[sid]})")
            seen[sid] = lineno
            label = entry.get("label")
            if not isinstance(label, int) or isinstance(label, bool):
                raise LabelError(lineno, f"label must be an integer, got {label!r}")
            p = _parse_probs(entry, lineno)
            if rows and p.shape[0] != rows[0].shape[0]:
                raise RecordParseError(
                    lineno, f"dimension {p.shape[0]} differs from {rows[0].shape[0]} on earlier lines"
                )
            if not 0 <= label < p.shape[0]:
                raise LabelError(lineno, f"label {label} outside 0..{p.shape[0] - 1}")
            ids.append(sid)
            labels.append(label)
            rows.append(p)
    if not rows:
        raise EmptyInputError(f"{path}: no records")
    name = name or header.get("model") or path.stem
    flops = flops_per_image if flops_per_image is not None else header.get("flops_per_image")
    return ModelRunRecords(name, None if flops is None else float(flops), ids, labels, np.vstack(rows))


def save_records(records: ModelRunRecords, path) -> None:
    with atomic_write(path) as fh:
        header = {"model": records.name}
        if records.flops_per_image is not None:
            header["flops_per_image"] = float(records.flops_per_image)
        fh.write(json.dumps(header) + "\n")
        for sid, label, p in zip(records.ids, records.labels, records.probs):
            fh.write(json.dumps({"id": sid, "label": int(label), "probs": [float(v) for v in p]}) + "\n")


# ---------------------------------------------------------------------------
# weights


def save_weights(model: ConfidenceModel, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "m": model.m,
        "sigma": model.sigma,
        "regressor": model.config.to_dict(),
        "provenance": model.provenance,
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"state/{k}": v for k, v in model.state.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with atomic_write(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> ConfidenceModel:
    try:
        with np.load(path, allow_pickle=False) as archive:
            data = {k: archive[k] for k in archive.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise WeightsCorruptionError(f"{path}: unreadable weights file ({exc})") from None
    if "meta" not in data:
        raise WeightsCorruptionError(f"{path}: missing metadata")
    try:
        meta = json.loads(data.pop("meta").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise WeightsCorruptionError(f"{path}: metadata is not valid JSON") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise WeightsVersionError(f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        config = RegressorConfig(**meta["regressor"])
        m, sigma = int(meta["m"]), float(meta["sigma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightsCorruptionError(f"{path}: bad hyperparameters ({exc})") from None

    ref_params, ref_state = tabnet.init_regressor(config, m, rng=0)
    ref_params = {"map.wq": np.zeros(m), "map.wk": np.zeros(m), **ref_params}
    params, state = {}, {}
    for prefix, ref, out in (("param/", ref_params, params), ("state/", ref_state, state)):
        for key, template in ref.items():
            arr = data.pop(prefix + key, None)
            if arr is None:
                raise WeightsCorruptionError(f"{path}: missing array {prefix}{key}")
            if arr.shape != template.shape or arr.dtype != np.float64:
                raise WeightsCorruptionError(
                    f"{path}: {prefix}{key} has shape {arr.shape}/{arr.dtype}, expected {template.shape}/float64"
                )
            if not np.all(np.isfinite(arr)):
                raise WeightsCorruptionError(f"{path}: {prefix}{key} contains non-finite values")
            out[key] = arr
    if data:
        raise WeightsCorruptionError(f"{path}: unexpected arrays {sorted(data)}")
    return ConfidenceModel(m, sigma, config, params, state, meta.get("provenance", {}))


# ---------------------------------------------------------------------------
# curves


def export_curve(curve, path) -> None:
    """Write a tradeoff curve as CSV with a header row and round-trip float precision."""
    curve = list(curve)
    if not curve:
        raise ClcnetError("refusing to export an empty curve")
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for pt in curve:
            writer.writerow([repr(float(getattr(pt, c))) for c in CURVE_COLUMNS])


def import_curve(path) -> list[TradeoffPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ClcnetError(f"{path}: unexpected curve columns {reader.fieldnames}")
        return [TradeoffPoint(**{c: float(row[c]) for c in CURVE_COLUMNS}) for row in reader]


def write_json(obj, path) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
