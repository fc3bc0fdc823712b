from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sleepstage.edfio import PsgRecording
from sleepstage.ensemble import Ensemble, Member, ensemble_predict, majority_vote, vote_epochs
from sleepstage.errors import ConfigError, DataError
from sleepstage.staging import ModelConfig, build_model, score_recording


def test_clear_majority():
    post = [np.full(5, 0.2)] * 3
    assert majority_vote([2, 2, 4], post) == 2


def test_tie_broken_by_summed_posterior():
    post = [np.array([0.1, 0.6, 0.1, 0.1, 0.1]), np.array([0.1, 0.1, 0.1, 0.6, 0.1]),
            np.array([0.0, 0.1, 0.0, 0.8, 0.1]), np.array([0.1, 0.7, 0.0, 0.1, 0.1])]
    # labels 1,3,3,1 tie; sums: N1 = 1.5, N3 = 1.6
    assert majority_vote([1, 3, 3, 1], post) == 3


def test_full_tie_goes_to_lowest_stage():
    post = [np.full(5, 0.2)] * 2
    assert majority_vote([4, 2], post) == 2


def test_single_member_and_errors():
    assert majority_vote([3], [np.full(5, 0.2)]) == 3
    with pytest.raises(ValueError):
        majority_vote([], [])
    with pytest.raises(ValueError):
        majority_vote([1, 2], [np.full(5, 0.2)])


@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31))
def test_vectorized_vote_matches_scalar(k, m, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, (k, m))
    post = rng.dirichlet(np.ones(5), (k, m))
    # quantize so posterior-sum ties occur as well
    post = np.round(post * 4) / 4
    got = vote_epochs(labels, post)
    for j in range(m):
        assert got[j] == majority_vote(labels[:, j], post[:, j])


def _recording(rng, m=3, fs=100):
    sig = {n: (rng.normal(size=fs * 30 * m), fs) for n in ("A", "B", "C", "D")}
    return PsgRecording.from_signals(sig, record_duration=30.0)


def _members(tmp_path, seeds):
    out = []
    for s in seeds:
        model = build_model(ModelConfig(), seed=s).eval()
        path = tmp_path / f"m{s}.ckpt"
        model.save(path)
        out.append(Member(model, f"D{s}", path.name))
    return out


def test_ensemble_predict_equals_vote_of_members(tmp_path, rng):
    rec = _recording(rng)
    ens = Ensemble(_members(tmp_path, [1, 2, 3]))
    hyp = ensemble_predict(ens, rec)
    labels, posts = [], []
    for mem in ens.members:
        h, p = score_recording(mem.model, rec, return_posteriors=True)
        labels.append(h.stages)
        posts.append(p)
    expected = [majority_vote([l[j] for l in labels], [p[j] for p in posts]) for j in range(len(hyp))]
    np.testing.assert_array_equal(hyp.stages, expected)


def test_manifest_round_trip(tmp_path):
    ens = Ensemble(_members(tmp_path, [4, 5]))
    ens.save_manifest(tmp_path / "ens.txt")
    back = Ensemble.load_manifest(tmp_path / "ens.txt")
    assert back.tags == ["D4", "D5"]
    assert [m.model.state_bytes() for m in back.members] == [m.model.state_bytes() for m in ens.members]


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("only-one-field\n")
    with pytest.raises(ConfigError):
        Ensemble.load_manifest(tmp_path / "bad.txt")
    with pytest.raises(ConfigError):
        Ensemble([])


def test_member_failure_is_attributed(tmp_path, rng):
    ens = Ensemble(_members(tmp_path, [1, 2]))
    short = PsgRecording.from_signals({"A": (rng.normal(size=100), 10)})
    with pytest.raises(DataError) as info:
        ens.predict_posteriors(short)
    assert info.value.member == 0
    assert "D1" in str(info.value)
