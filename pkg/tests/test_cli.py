from __future__ import annotations

import json

import numpy as np
import pytest

from sleepstage.cli import OUTPUT_ENV, main
from sleepstage.stages import read_hypnogram


def _config_json(out: str) -> dict:
    """The resolved configuration printed first by every command."""
    start = out.index("{")
    depth = 0
    for i, ch in enumerate(out[start:], start):
        depth += {"{": 1, "}": -1}.get(ch, 0)
        if depth == 0:
            return json.loads(out[start:i + 1])
    raise AssertionError("no JSON object in output")


@pytest.fixture(scope="module")
def db_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "D1"
    assert main(["synth", "--id", "D1", "--out", str(out), "--recordings", "5", "--epochs", "12",
                 "--fs", "128", "--gain", '{"eeg": 2.0}', "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def model_path(db_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    assert main(["train", "--db", str(db_dir), "--config", "CNN_1", "--max-epochs", "1",
                 "--out", str(out)]) == 0
    return out / "D1__CNN_1.ckpt"


def test_synth_writes_database(db_dir, capsys):
    files = sorted(p.name for p in db_dir.iterdir())
    assert "database.json" in files
    assert sum(f.endswith(".edf") for f in files) == 5
    assert sum(f.endswith(".hyp") for f in files) == 5


def test_synth_prints_config(tmp_path, capsys):
    assert main(["synth", "--id", "X", "--out", str(tmp_path), "--recordings", "1", "--epochs", "2",
                 "--fs", "128"]) == 0
    cfg = _config_json(capsys.readouterr().out)
    assert cfg["command"] == "synth"
    assert cfg["spec"]["id"] == "X" and cfg["spec"]["fs"] == 128.0
    assert cfg["output"] == str(tmp_path)


def test_train_outputs(model_path, capsys):
    assert model_path.is_file()
    assert model_path.with_suffix(".csv").is_file()


def test_train_prints_model_config(db_dir, tmp_path, capsys):
    assert main(["train", "--db", str(db_dir), "--config", "CNN_1", "--max-epochs", "1",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    cfg = _config_json(out)
    assert cfg["model"]["name"] == "CNN_1"
    assert cfg["max_epochs"] == 1 and cfg["seed"] == 0
    assert "TS" in out


def test_score_writes_hypnogram(model_path, db_dir, tmp_path, capsys):
    edf = db_dir / "D1_01.edf"
    out = tmp_path / "scored"
    assert main(["score", "--model", str(model_path), "--edf", str(edf), "--db", str(db_dir),
                 "--out", str(out)]) == 0
    hyp = read_hypnogram(out / "D1_01.hyp")
    assert len(hyp) == 12
    assert np.all(hyp.stages < 5)


def test_evaluate_prints_kappa(model_path, db_dir, capsys):
    assert main(["evaluate", "--model", str(model_path), "--db", str(db_dir)]) == 0
    out = capsys.readouterr().out
    assert "D1  CNN_1  kappa" in out


def test_preprocess(db_dir, tmp_path, capsys):
    assert main(["preprocess", "--db", str(db_dir), "--out", str(tmp_path), "--filter"]) == 0
    cfg = _config_json(capsys.readouterr().out)
    assert cfg["filter"]["enabled"] is True
    z = np.load(tmp_path / "D1_01.npz")
    assert z["epochs"].shape == (12, 4, 3000)
    assert z["stages"].shape == (12,)


def test_output_env_override(db_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["preprocess", "--db", str(db_dir), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "D1_01.npz").is_file()
    assert not (tmp_path / "flag").exists()


def test_experiment_manifest(db_dir, tmp_path, capsys):
    manifest = {
        "databases": [str(db_dir)],
        "synth": [{"id": "D2", "n_recordings": 5, "epochs_per_recording": 12, "fs": 128.0, "seed": 2}],
        "configs": ["CNN_1"],
        "seed": 1,
        "output": str(tmp_path / "run"),
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["experiment", "--manifest", str(tmp_path / "m.json"), "--max-epochs", "1"]) == 0
    out = capsys.readouterr().out
    cfg = _config_json(out)
    assert cfg["seed"] == 1 and cfg["configs"] == ["CNN_1"] and cfg["max_epochs"] == 1
    assert "Aggregated over databases" in out
    assert (tmp_path / "run" / "reports" / "table3.csv").is_file()
    assert (tmp_path / "run" / "ensembles" / "ENS_D1__CNN_1.txt").read_text().startswith("D2\t")


def test_gradcheck_reduced(capsys):
    assert main(["gradcheck", "--config", "CNN_3", "--reduced", "--batch", "2"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_failing_tolerance(capsys):
    assert main(["gradcheck", "--config", "CNN_3", "--reduced", "--batch", "2", "--tolerance", "0"]) == 4


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["train"],
        ["train", "--db", "/nonexistent/db", "--config", "CNN_1"],
        ["gradcheck", "--config", "CNN_42"],
        ["experiment"],
        ["experiment", "--manifest", "/nonexistent/m.json"],
    ],
)
def test_configuration_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_data_error_exit_3(model_path, db_dir, tmp_path, capsys):
    bad = tmp_path / "bad.edf"
    bad.write_bytes(b"0" * 100)
    assert main(["score", "--model", str(model_path), "--edf", str(bad), "--db", str(db_dir)]) == 3
    assert "error" in capsys.readouterr().err


def test_missing_edf_exit_3(model_path, db_dir, tmp_path, capsys):
    assert main(["score", "--model", str(model_path), "--edf", str(tmp_path / "no.edf"),
                 "--db", str(db_dir)]) == 3


def test_empty_split_exit_4(tmp_path, capsys):
    assert main(["synth", "--id", "U", "--out", str(tmp_path / "U"), "--recordings", "5", "--epochs", "2",
                 "--fs", "128", "--movement", "1.0"]) == 0
    assert main(["train", "--db", str(tmp_path / "U"), "--max-epochs", "1", "--out", str(tmp_path)]) == 4
