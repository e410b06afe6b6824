from __future__ import annotations

import json

import pytest

from clcnet import fileio
from clcnet.cli import run_cli

SMALL_MODEL = ["--m", "16", "--sigma", "0.05", "--n-d", "4", "--n-a", "4", "--n-steps", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["synth", "--out-dir", str(root), "--n-samples", "400", "--seed", "1"]) == 0
    assert run_cli(["train", "--records", str(root / "shallow.jsonl"), "--out", str(root / "w.bin"),
                    "--max-epochs", "2", "--batch-size", "64", "--log", str(root / "log.csv"),
                    "--seed", "1", *SMALL_MODEL]) == 0
    return root


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_synth_outputs_are_reproducible(workdir, tmp_path, capsys):
    assert run_cli(["synth", "--out-dir", str(tmp_path), "--n-samples", "400", "--seed", "1"]) == 0
    for name in ("shallow.jsonl", "deep.jsonl"):
        assert (tmp_path / name).read_bytes() == (workdir / name).read_bytes()


def test_train_is_reproducible(workdir, tmp_path):
    assert run_cli(["train", "--records", str(workdir / "shallow.jsonl"), "--out", str(tmp_path / "w.bin"),
                    "--max-epochs", "2", "--batch-size", "64", "--seed", "1", *SMALL_MODEL]) == 0
    assert (tmp_path / "w.bin").read_bytes() == (workdir / "w.bin").read_bytes()
    assert (workdir / "log.csv").read_text().splitlines()[0] == "epoch,train_mse,val_mse"


def test_score_single_vector(workdir, capsys):
    assert run_cli(["score", "--weights", str(workdir / "w.bin"), "--probs", "0.6,0.1,0.1,0.1,0.1"]) == 0
    value = float(capsys.readouterr().out.strip())
    assert 0.0 <= value <= 1.0


def test_score_records(workdir, capsys):
    assert run_cli(["score", "--weights", str(workdir / "w.bin"), "--records", str(workdir / "deep.jsonl")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 400
    assert 0.0 <= json.loads(lines[0])["confidence"] <= 1.0


def test_cascade_single_threshold(workdir, capsys):
    assert run_cli(["cascade", "--shallow", str(workdir / "shallow.jsonl"), "--deep", str(workdir / "deep.jsonl"),
                    "--weights", str(workdir / "w.bin"), "--threshold", "0"]) == 0
    point = _last_json(capsys)
    assert point["deep_fraction"] == 0.0
    assert point["top1_accuracy"] == fileio.load_records(workdir / "shallow.jsonl").accuracy()


def test_sweep_writes_curve_and_summary(workdir, tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert run_cli(["sweep", "--shallow", str(workdir / "shallow.jsonl"), "--deep", str(workdir / "deep.jsonl"),
                    "--weights", str(workdir / "w.bin"), "--grid-step", "0.01", "--out", str(out),
                    "--verify"]) == 0
    assert _last_json(capsys)["verified"] is True
    assert len(fileio.import_curve(out)) == 101
    summary = json.loads((tmp_path / "curve.summary.json").read_text())
    for key in ("gem", "oracle_upper_bound", "maxprob_best_accuracy", "maxprob_curve"):
        assert key in summary
    assert len(fileio.import_curve(tmp_path / "curve_maxprob.csv")) == 101


def test_folds(workdir, tmp_path, capsys):
    out = tmp_path / "folds"
    assert run_cli(["folds", "--paired", str(workdir / "shallow.jsonl"), str(workdir / "deep.jsonl"),
                    "--n-folds", "2", "--max-epochs", "1", "--batch-size", "64", "--out-dir", str(out),
                    *SMALL_MODEL]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [f["fold"] for f in summary["folds"]] == [0, 1]
    assert (out / "aggregate_curve.csv").exists() and (out / "fold1_weights.npz").exists()


def test_gradcheck(capsys):
    assert run_cli(["gradcheck", "--n-models", "1", "--seed", "2"]) == 0
    assert _last_json(capsys)["max_rel_error"] <= 1e-4


def test_data_dir_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("CLCNET_DATA_DIR", str(workdir))
    assert run_cli(["cascade", "--shallow", "shallow.jsonl", "--deep", "deep.jsonl", "--threshold", "1"]) == 0
    assert _last_json(capsys)["deep_fraction"] == 1.0


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        run_cli(["nope"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        run_cli(["score", "--weights", "w.bin", "--probs", "0.5,0.5", "--bogus"])
    assert err.value.code == 2


def test_runtime_error_is_one_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "label": 0, "probs": [0.5, 0.5]}\n{"id": "a", "label": 0, "probs": [0.5, 0.5]}\n')
    code = run_cli(["sweep", "--shallow", str(bad), "--deep", str(bad), "--out", str(tmp_path / "c.csv")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: DuplicateIdError: line 2:")


def test_help_documents_formats(capsys):
    with pytest.raises(SystemExit) as err:
        run_cli(["sweep", "--help"])
    assert err.value.code == 0
    text = capsys.readouterr().out
    assert "record files" in text and "weights files" in text
