from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sleepstage.errors import LabelError
from sleepstage.stages import (
    Hypnogram,
    Stage,
    normalize_label,
    read_hypnogram,
    sidecar_path,
    write_hypnogram,
)


@pytest.mark.parametrize(
    "token, standard, expected",
    [
        ("W", "AASM", Stage.W),
        ("n2", "AASM", Stage.N2),
        (" R \n", "AASM", Stage.R),
        ("S1", "RK", Stage.N1),
        ("S3", "RK", Stage.N3),
        ("S4", "RK", Stage.N3),
        ("MT", "RK", Stage.UNSCORED),
        ("U", "AASM", Stage.UNSCORED),
    ],
)
def test_normalize_label(token, standard, expected):
    assert normalize_label(token, standard) is expected


def test_unknown_label_reports_line():
    with pytest.raises(LabelError, match="line 7"):
        normalize_label("S4", "AASM", line=7)


def test_stage_indices_are_output_order():
    assert [int(s) for s in (Stage.W, Stage.N1, Stage.N2, Stage.N3, Stage.R)] == [0, 1, 2, 3, 4]


def test_sidecar_path():
    assert sidecar_path("/data/night1.edf").name == "night1.hyp"


@given(st.lists(st.sampled_from([-1, 0, 1, 2, 3, 4]), max_size=60))
def test_hypnogram_round_trip(tmp_path_factory, stages):
    path = tmp_path_factory.mktemp("hyp") / "x.hyp"
    hyp = Hypnogram(np.array(stages))
    write_hypnogram(hyp, path)
    assert read_hypnogram(path) == hyp


def test_read_skips_blank_lines(tmp_path):
    p = tmp_path / "a.hyp"
    p.write_text("W\n\nS1\nS4\n", encoding="ascii")
    with pytest.raises(LabelError):
        read_hypnogram(p)
    assert read_hypnogram(p, "RK").labels() == ["W", "N1", "N3"]


def test_hypnogram_is_immutable():
    hyp = Hypnogram.from_labels(["W", "N2"])
    with pytest.raises(ValueError):
        hyp.stages[0] = 3
