from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from clcnet import fileio
from clcnet.cascade import CascadeInputs, TradeoffPoint, sweep_inputs
from clcnet.errors import (
    ClcnetError,
    DuplicateIdError,
    EmptyInputError,
    LabelError,
    RecordParseError,
    WeightsCorruptionError,
    WeightsVersionError,
)
from clcnet.model import ConfidenceModel
from clcnet.records import ModelRunRecords
from clcnet.tabnet import RegressorConfig


def _write_lines(path, entries):
    path.write_text("".join(json.dumps(e) + "\n" for e in entries))
    return path


def test_load_well_formed(tmp_path):
    path = _write_lines(tmp_path / "r.jsonl", [
        {"model": "b0", "flops_per_image": 3.9e8},
        {"id": "a", "label": 0, "probs": [0.7, 0.2, 0.1]},
        {"id": "b", "label": 2, "logits": [0.0, 0.0, 0.0]},
        {"id": "c", "label": 1, "probs": [0.1, 0.8, 0.1]},
    ])
    rec = fileio.load_records(path)
    assert len(rec) == 3 and rec.name == "b0" and rec.flops_per_image == 3.9e8
    np.testing.assert_allclose(rec.probs[1], np.full(3, 1 / 3))
    assert fileio.load_records(path, name="x", flops_per_image=1.0).name == "x"


def test_header_is_optional(tmp_path):
    path = _write_lines(tmp_path / "plain.jsonl", [{"id": 1, "label": 0, "probs": [0.5, 0.5]}])
    rec = fileio.load_records(path)
    assert rec.name == "plain" and rec.flops_per_image is None and rec.ids == ["1"]


def test_renormalise_within_tolerance(tmp_path, caplog):
    path = _write_lines(tmp_path / "r.jsonl", [{"id": "a", "label": 0, "probs": [0.58, 0.4]}])
    with caplog.at_level(logging.WARNING):
        rec = fileio.load_records(path)
    np.testing.assert_allclose(rec.probs[0], [0.58 / 0.98, 0.4 / 0.98])
    assert "renormalised" in caplog.text
    bad = _write_lines(tmp_path / "bad.jsonl", [{"id": "a", "label": 0, "probs": [0.5, 0.4]}])
    with pytest.raises(RecordParseError, match="line 1"):
        fileio.load_records(bad)


def test_duplicate_id_cites_line(tmp_path):
    entries = [{"id": f"x{i}", "label": 0, "probs": [0.5, 0.5]} for i in range(6)]
    entries.append({"id": "x2", "label": 0, "probs": [0.5, 0.5]})
    path = _write_lines(tmp_path / "dup.jsonl", entries)
    with pytest.raises(DuplicateIdError) as err:
        fileio.load_records(path)
    assert err.value.line == 7


@pytest.mark.parametrize(
    "entry, error",
    [
        ({"id": "a", "label": 3, "probs": [0.5, 0.5]}, LabelError),
        ({"id": "a", "label": -1, "probs": [0.5, 0.5]}, LabelError),
        ({"id": "a", "label": "0", "probs": [0.5, 0.5]}, LabelError),
        ({"id": "a", "label": 0}, RecordParseError),
        ({"id": "a", "label": 0, "probs": [0.5, 0.5], "logits": [0, 0]}, RecordParseError),
        ({"id": "a", "label": 0, "probs": [1.0]}, RecordParseError),
        ({"id": "a", "label": 0, "probs": [1.2, -0.2]}, RecordParseError),
        ({"label": 0, "probs": [0.5, 0.5]}, RecordParseError),
    ],
)
def test_rejects_bad_records(tmp_path, entry, error):
    path = _write_lines(tmp_path / "r.jsonl", [{"id": "ok", "label": 0, "probs": [0.5, 0.5]}, entry])
    with pytest.raises(error) as err:
        fileio.load_records(path)
    assert err.value.line == 2


def test_dimension_mismatch_and_bad_json(tmp_path):
    path = _write_lines(tmp_path / "r.jsonl", [
        {"id": "a", "label": 0, "probs": [0.5, 0.5]},
        {"id": "b", "label": 0, "probs": [0.5, 0.25, 0.25]},
    ])
    with pytest.raises(RecordParseError, match="dimension"):
        fileio.load_records(path)
    junk = tmp_path / "junk.jsonl"
    junk.write_text('{"id": "a", "label": 0, "probs": [0.5, 0.5]}\n{oops\n')
    with pytest.raises(RecordParseError) as err:
        fileio.load_records(junk)
    assert err.value.line == 2


def test_empty_file(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("\n")
    with pytest.raises(EmptyInputError):
        fileio.load_records(path)


def test_records_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rec = ModelRunRecords("m", 1.5e9, ["a", "b", "c"], [0, 1, 2], rng.dirichlet(np.ones(3), size=3))
    fileio.save_records(rec, tmp_path / "r.jsonl")
    back = fileio.load_records(tmp_path / "r.jsonl")
    assert back.ids == rec.ids and back.name == "m" and back.flops_per_image == 1.5e9
    np.testing.assert_array_equal(back.labels, rec.labels)
    np.testing.assert_array_equal(back.probs, rec.probs)


def test_weights_round_trip_is_bitwise(tmp_path):
    model = ConfidenceModel.init(m=20, sigma=0.03, config=RegressorConfig(n_d=4, n_a=5, attn_width=3), seed=5)
    model.state = {k: v + 0.1 for k, v in model.state.items()}
    model.provenance = {"seed": 5, "fold": 2}
    path = tmp_path / "w.bin"
    fileio.save_weights(model, path)
    back = fileio.load_weights(path)
    assert back.config == model.config and back.m == 20 and back.sigma == 0.03
    assert back.provenance == {"seed": 5, "fold": 2}
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    probs = np.random.default_rng(1).dirichlet(np.ones(6), size=100)
    np.testing.assert_array_equal(back.score_batch(probs), model.score_batch(probs))


def _rewrite(path, mutate):
    with np.load(path) as archive:
        data = {k: archive[k] for k in archive.files}
    mutate(data)
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def test_weights_errors(tmp_path):
    model = ConfidenceModel.init(m=10, config=RegressorConfig(n_d=2, n_a=2, attn_width=2), seed=0)
    path = tmp_path / "w.npz"

    fileio.save_weights(model, path)

    def bump(data):
        meta = json.loads(data["meta"].tobytes())
        meta["format_version"] = 99
        data["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)

    _rewrite(path, bump)
    with pytest.raises(WeightsVersionError):
        fileio.load_weights(path)

    fileio.save_weights(model, path)
    _rewrite(path, lambda d: d.__setitem__("param/head.w", np.zeros(3)))
    with pytest.raises(WeightsCorruptionError, match="shape"):
        fileio.load_weights(path)

    fileio.save_weights(model, path)
    _rewrite(path, lambda d: d["param/head.b"].__setitem__(0, np.nan))
    with pytest.raises(WeightsCorruptionError, match="non-finite"):
        fileio.load_weights(path)

    fileio.save_weights(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(WeightsCorruptionError):
        fileio.load_weights(path)


def _curve():
    rng = np.random.default_rng(2)
    n = 60
    inputs = CascadeInputs(rng.random(n), rng.random(n), rng.integers(0, 3, n), rng.integers(0, 3, n),
                           rng.integers(0, 3, n), 0.39e9, 4.2e9)
    return sweep_inputs(inputs)


def test_curve_csv_round_trip(tmp_path):
    curve = _curve()
    path = tmp_path / "curve.csv"
    fileio.export_curve(curve, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 102
    assert lines[0] == "threshold,top1_accuracy,avg_flops_per_image,deep_fraction"
    back = fileio.import_curve(path)
    for a, b in zip(curve, back):
        for col in fileio.CURVE_COLUMNS:
            assert getattr(a, col) == getattr(b, col)


def test_empty_curve_writes_nothing(tmp_path):
    path = tmp_path / "none.csv"
    with pytest.raises(ClcnetError):
        fileio.export_curve([], path)
    assert not path.exists()


def test_atomic_write_leaves_no_partial_file(tmp_path):
    path = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with fileio.atomic_write(path) as fh:
            fh.write("partial")
            raise RuntimeError("boom")
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []


def test_unwritable_curve_path(tmp_path):
    with pytest.raises(OSError):
        fileio.export_curve([TradeoffPoint(0.0, 1.0, 1.0, 0.0)], tmp_path / "missing" / "c.csv")
