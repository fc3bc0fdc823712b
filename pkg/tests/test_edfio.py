from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sleepstage.edfio import (
    MontageSpec,
    PsgRecording,
    digital_to_physical,
    read_edf,
    select_montage,
    write_edf,
)
from sleepstage.errors import (
    CalibrationError,
    EdfHeaderError,
    EdfStructureError,
    MontageError,
    PhysicalRangeError,
)
from sleepstage.stages import Hypnogram, write_hypnogram


def _recording(rng, n_records=4, rates=(100, 200, 50), duration=1.0):
    signals = {
        f"CH{i}": (rng.normal(0, 30, int(fs * duration * n_records)), fs) for i, fs in enumerate(rates)
    }
    return PsgRecording.from_signals(signals, record_duration=duration)


def _step(ch):
    return ch.header.gain


def test_round_trip_within_one_step(rng):
    rec = _recording(rng)
    back = read_edf(write_edf(rec))
    assert back.labels == rec.labels
    for a, b in zip(rec.channels, back.channels):
        assert np.max(np.abs(a.samples - b.samples)) <= _step(a) / 2 + 1e-9
        assert a.header == b.header
    assert back.header == rec.header


def test_header_bytes_identical_after_second_write(rng):
    blob = write_edf(_recording(rng))
    again = write_edf(read_edf(blob))
    assert again == blob


def test_record_layout_is_interleaved():
    rec = PsgRecording.from_signals(
        {"A": (np.array([1.0, 2.0, 3.0, 4.0]), 2), "B": (np.array([5.0, 6.0]), 1)}
    )
    blob = write_edf(rec)
    digital = np.frombuffer(blob[256 * 3 :], dtype="<i2").reshape(2, 3)
    a = rec.channels[0].header
    b = rec.channels[1].header
    np.testing.assert_allclose(digital_to_physical(digital[:, :2].ravel(), a), [1, 2, 3, 4], atol=a.gain)
    np.testing.assert_allclose(digital_to_physical(digital[:, 2], b), [5, 6], atol=b.gain)


def test_calibration_law():
    from sleepstage.edfio import SignalHeader

    sh = SignalHeader("X", physical_min=-100.0, physical_max=100.0, digital_min=-2048, digital_max=2047)
    np.testing.assert_allclose(digital_to_physical([-2048, 2047], sh), [-100.0, 100.0])
    assert digital_to_physical(0, sh) == pytest.approx(-100.0 + 2048 * 200.0 / 4095)


def test_file_and_stream_sources(tmp_path, rng):
    rec = _recording(rng)
    path = tmp_path / "n.edf"
    write_edf(rec, path)
    write_hypnogram(Hypnogram.from_labels(["W", "N1"]), tmp_path / "n.hyp")
    from_path = read_edf(path, with_sidecar=True)
    from_stream = read_edf(io.BytesIO(path.read_bytes()))
    assert from_path.name == "n"
    assert from_path.hypnogram.labels() == ["W", "N1"]
    assert from_stream.hypnogram is None
    np.testing.assert_array_equal(from_path.channels[0].samples, from_stream.channels[0].samples)


def test_truncated_data_names_record(rng):
    blob = write_edf(_recording(rng, n_records=4))
    with pytest.raises(EdfStructureError, match="data record 3 of 4"):
        read_edf(blob[: len(blob) - 1000])


def test_truncated_header():
    with pytest.raises(EdfStructureError):
        read_edf(b"0" * 100)


def test_bad_numeric_field_reports_offset(rng):
    blob = bytearray(write_edf(_recording(rng)))
    blob[236:244] = b"abc     "
    with pytest.raises(EdfHeaderError) as info:
        read_edf(bytes(blob))
    assert info.value.offset == 236


def test_unknown_record_count(rng):
    blob = bytearray(write_edf(_recording(rng, n_records=3)))
    blob[236:244] = b"-1      "
    assert read_edf(bytes(blob)).header.num_records == 3


def test_annotation_channel_is_skipped(rng):
    rec = PsgRecording.from_signals(
        {"EEG": (rng.normal(size=20), 10), "EDF Annotations": (np.zeros(10), 5)}, record_duration=1.0
    )
    back = read_edf(write_edf(rec))
    assert back.labels == ["EEG"]


def test_out_of_range_write_is_an_error(rng):
    rec = _recording(rng)
    ch = rec.channels[0]
    from dataclasses import replace

    narrow = replace(ch.header, physical_max=float(ch.samples.max()) - 1.0)
    bad = PsgRecording(rec.header, (type(ch)(narrow, ch.samples),) + rec.channels[1:])
    with pytest.raises(PhysicalRangeError):
        write_edf(bad)


def test_degenerate_calibration(rng):
    rec = _recording(rng, rates=(10,))
    from dataclasses import replace

    ch = rec.channels[0]
    bad = PsgRecording(rec.header, (type(ch)(replace(ch.header, digital_min=5, digital_max=5), ch.samples),))
    with pytest.raises(CalibrationError):
        write_edf(bad)


def test_montage_difference_and_case_folding(rng):
    n = 300
    a, b, c = rng.normal(size=(3, n))
    rec = PsgRecording.from_signals({"EEG C4": (a, 100), "M1": (b, 100), "emg": (c, 100), "EOG": (c, 100)})
    spec = MontageSpec(("eeg c4", "M1"), "EEG C4", "EMG", "EOG")
    out = select_montage(rec, spec)
    np.testing.assert_allclose(out.channels[0].samples, rec.channels[0].samples - rec.channels[1].samples)
    assert out.labels[0] == "eeg c4-M1"
    assert len(out.channels) == 4


def test_montage_missing_label_lists_available(rng):
    rec = PsgRecording.from_signals({"A": (rng.normal(size=10), 10)})
    with pytest.raises(MontageError, match="available"):
        select_montage(rec, MontageSpec("A", "B", "A", "A"))


def test_montage_rate_mismatch(rng):
    rec = PsgRecording.from_signals({"A": (rng.normal(size=20), 20), "B": (rng.normal(size=10), 10)})
    with pytest.raises(MontageError, match="sampling rates differ"):
        select_montage(rec, MontageSpec(("A", "B"), "A", "A", "A"))


def test_montage_dict_round_trip():
    spec = MontageSpec(("C4", "M1"), "O2", "EMG", "EOG", "ECG")
    assert MontageSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(MontageError):
        MontageSpec.from_dict({"eeg1": "A"})


@given(
    st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=4, max_size=40).filter(
        lambda v: len(v) % 2 == 0
    )
)
def test_quantization_bound_property(values):
    rec = PsgRecording.from_signals({"X": (np.array(values), 2)})
    ch = rec.channels[0]
    back = read_edf(write_edf(rec)).channels[0]
    assert np.max(np.abs(back.samples - ch.samples)) <= ch.header.gain / 2 * (1 + 1e-9) + 1e-12
