from __future__ import annotations

import numpy as np
import pytest

from sleepstage import dsp
from sleepstage.edfio import read_edf, select_montage
from sleepstage.errors import ConfigError
from sleepstage.experiments import load_dataset
from sleepstage.stages import Stage, read_hypnogram
from sleepstage.synth import (
    DEFAULT_TRANSITIONS,
    DatabaseSpec,
    SynthDbSpec,
    markov_stages,
    stage_epoch,
    synth_database,
)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SynthDbSpec("x", transitions=((1.0,) * 5,) * 5)
    with pytest.raises(ConfigError):
        SynthDbSpec("x", gain=0.0)
    with pytest.raises(ConfigError):
        SynthDbSpec("x", gain={"eeg": 1.0, "foo": 2.0})
    with pytest.raises(ConfigError):
        SynthDbSpec("x", fs=100.0, mains_hz=50.0)
    with pytest.raises(ConfigError):
        SynthDbSpec("x", standard="XYZ")


def test_spec_dict_round_trip():
    spec = SynthDbSpec("x", gain={"eeg": 2.0}, standard="RK", movement_fraction=0.1)
    assert SynthDbSpec.from_dict(spec.to_dict()) == spec
    assert spec.gains == {"eeg": 2.0, "emg": 1.0, "eog": 1.0, "ecg": 1.0}


def test_markov_chain_respects_zero_transitions(rng):
    s = markov_stages(DEFAULT_TRANSITIONS, Stage.W, 5000, rng)
    assert s[0] == Stage.W
    pairs = set(zip(s[:-1], s[1:]))
    t = np.asarray(DEFAULT_TRANSITIONS)
    assert all(t[a, b] > 0 for a, b in pairs)
    counts = np.bincount(s, minlength=5)
    assert np.all(counts > 200)


def test_recipes_differ_by_stage(rng):
    fs = 100.0
    t = np.arange(3000) / fs
    emg = [np.std(stage_epoch(s, t, fs, rng)["emg"]) for s in range(5)]
    assert emg[Stage.W] > emg[Stage.N1] > emg[Stage.N2] > emg[Stage.R]
    n3 = stage_epoch(Stage.N3, t, fs, rng)["eeg1"]
    spec = np.abs(np.fft.rfft(n3))
    assert np.fft.rfftfreq(3000, 1 / fs)[np.argmax(spec)] < 2.5
    with pytest.raises(ValueError):
        stage_epoch(7, t, fs, rng)


def _small(**kw):
    base = dict(n_recordings=2, epochs_per_recording=6, fs=128.0)
    base.update(kw)
    return SynthDbSpec("T", **base)


def test_database_files_are_deterministic(tmp_path):
    a = synth_database(_small(), tmp_path / "a")
    b = synth_database(_small(), tmp_path / "b")
    assert a.recordings == ["T_01.edf", "T_02.edf"]
    for name in a.recordings + ["T_01.hyp", "database.json", "synth.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = synth_database(_small(seed=1), tmp_path / "c")
    assert (tmp_path / "c" / "T_01.edf").read_bytes() != (tmp_path / "a" / "T_01.edf").read_bytes()
    assert c.id == "T"


def test_database_reads_back(tmp_path):
    db = synth_database(_small(), tmp_path)
    again = DatabaseSpec.load(tmp_path)
    assert again.to_dict() == db.to_dict()
    rec = read_edf(again.paths()[0], with_sidecar=True)
    assert rec.fs(0) == 128.0
    assert len(rec.hypnogram) == 6
    mont = select_montage(rec, again.montage)
    assert len(mont.channels) == 5


def test_rk_labels_and_movement(tmp_path):
    spec = _small(standard="RK", movement_fraction=0.5, epochs_per_recording=20)
    synth_database(spec, tmp_path)
    tokens = set((tmp_path / "T_01.hyp").read_text().split()) | set((tmp_path / "T_02.hyp").read_text().split())
    assert "MT" in tokens
    assert not tokens & {"N1", "N2", "N3"}
    hyp = read_hypnogram(tmp_path / "T_01.hyp", "RK")
    assert np.any(hyp.stages == Stage.UNSCORED)


def test_standardized_epochs_ignore_gain(tmp_path):
    a = load_dataset(synth_database(_small(gain=1.0), tmp_path / "a"))
    b = load_dataset(synth_database(_small(gain=3.7), tmp_path / "b"))
    for ra, rb in zip(a.recordings, b.recordings):
        np.testing.assert_allclose(ra.std, rb.std, atol=2e-3)
        np.testing.assert_array_equal(ra.stages, rb.stages)


def test_filtering_reduces_heartbeat_leak(tmp_path):
    db = synth_database(_small(epochs_per_recording=10, fs=200.0), tmp_path)
    rec = select_montage(read_edf(db.paths()[0]), db.montage)
    ecg = dsp.resample(rec.channels[4].samples, 200.0)[: 10 * 3000]

    def leak(cfg):
        emg = dsp.preprocess(rec, cfg).epochs[:, 2].reshape(-1)
        return abs(np.corrcoef(emg[3000:], ecg[3000:])[0, 1])

    assert leak(dsp.FilterConfig(enabled=True)) < 0.5 * leak(dsp.FilterConfig(enabled=False))
