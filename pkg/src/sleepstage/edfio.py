"""EDF(+) reading and writing, and montage resolution.

Only the subset of EDF needed by the staging pipeline is supported:
continuous 16-bit recordings. ``EDF Annotations`` signals are skipped on
read; hypnograms travel in ``.hyp`` sidecar files instead.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import (
    CalibrationError,
    EdfHeaderError,
    EdfStructureError,
    MontageError,
    PhysicalRangeError,
)
from .stages import Hypnogram, read_hypnogram, sidecar_path

ANNOTATION_LABEL = "EDF Annotations"

# (name, width) in file order
_MAIN_FIELDS = (
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("num_records", 8),
    ("record_duration", 8),
    ("num_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


@dataclass(frozen=True)
class EdfHeader:
    version: str = "0"
    patient_id: str = "X X X X"
    recording_id: str = "Startdate X X X X"
    start_date: str = "01.01.85"
    start_time: str = "00.00.00"
    header_bytes: int = 512
    reserved: str = ""
    num_records: int = 0
    record_duration: float = 1.0
    num_signals: int = 1

    def __post_init__(self):
        if self.header_bytes != 256 + 256 * self.num_signals:
            raise EdfStructureError(
                f"header_bytes {self.header_bytes} != 256 + 256 * {self.num_signals}"
            )
        if self.record_duration <= 0:
            raise EdfStructureError("record duration must be positive")
        if self.num_records < 0:
            raise EdfStructureError("number of data records must be non-negative")


@dataclass(frozen=True)
class SignalHeader:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int = -32768
    digital_max: int = 32767
    physical_dimension: str = "uV"
    transducer: str = ""
    prefilter: str = ""
    samples_per_record: int = 1
    reserved: str = ""

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def sampling_rate(self, record_duration: float) -> float:
        return self.samples_per_record / record_duration


@dataclass(frozen=True)
class Channel:
    header: SignalHeader
    samples: np.ndarray

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def label(self) -> str:
        return self.header.label


@dataclass(frozen=True)
class PsgRecording:
    header: EdfHeader
    channels: tuple[Channel, ...]
    hypnogram: Hypnogram | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        for ch in self.channels:
            expected = self.header.num_records * ch.header.samples_per_record
            if ch.samples.shape != (expected,):
                raise EdfStructureError(
                    f"channel {ch.label!r} has {ch.samples.size} samples, "
                    f"header implies {expected}"
                )
            if not np.all(np.isfinite(ch.samples)):
                raise EdfStructureError(f"channel {ch.label!r} has non-finite samples")

    @property
    def labels(self) -> list[str]:
        return [ch.label for ch in self.channels]

    def fs(self, index: int) -> float:
        return self.channels[index].header.sampling_rate(self.header.record_duration)

    @property
    def duration(self) -> float:
        return self.header.num_records * self.header.record_duration

    def channel(self, label: str) -> Channel:
        return self.channels[_resolve_label(self.labels, label)]

    def with_hypnogram(self, hyp: Hypnogram | None) -> PsgRecording:
        return replace(self, hypnogram=hyp)

    @classmethod
    def from_signals(
        cls,
        signals: dict[str, tuple[np.ndarray, float]],
        record_duration: float = 1.0,
        hypnogram: Hypnogram | None = None,
        name: str = "",
        **header_fields,
    ) -> PsgRecording:
        """Build a recording from ``{label: (samples, fs)}``.

        Physical ranges are derived from the data and widened so they survive
        the 8-character header fields. Every signal must span a whole number
        of records.
        """
        if not signals:
            raise EdfStructureError("a recording needs at least one signal")
        channels = []
        n_records = None
        for label, (samples, fs) in signals.items():
            samples = np.asarray(samples, dtype=np.float64)
            spr = fs * record_duration
            if abs(spr - round(spr)) > 1e-9:
                raise EdfStructureError(f"{label!r}: fs * record_duration is not integral")
            spr = int(round(spr))
            if samples.size % spr:
                raise EdfStructureError(f"{label!r}: length is not a whole number of records")
            n = samples.size // spr
            if n_records is None:
                n_records = n
            elif n != n_records:
                raise EdfStructureError(f"{label!r}: duration differs from other signals")
            lo, hi = physical_range_for(samples)
            channels.append(
                Channel(
                    SignalHeader(label=label, physical_min=lo, physical_max=hi,
                                 samples_per_record=spr),
                    samples,
                )
            )
        header = EdfHeader(
            header_bytes=256 * (len(channels) + 1),
            num_records=n_records,
            record_duration=record_duration,
            num_signals=len(channels),
            **header_fields,
        )
        return cls(header, tuple(channels), hypnogram, name)


Source = Union[bytes, bytearray, memoryview, BinaryIO, str, os.PathLike]


def physical_range_for(samples: np.ndarray) -> tuple[float, float]:
    """Smallest 8-character-representable range enclosing ``samples``."""
    lo = float(np.min(samples)) if samples.size else -1.0
    hi = float(np.max(samples)) if samples.size else 1.0
    if hi - lo < 1e-6:
        lo, hi = lo - 1.0, hi + 1.0
    for decimals in range(6, -1, -1):
        scale = 10.0**decimals
        plo = math.floor(lo * scale) / scale
        phi = math.ceil(hi * scale) / scale
        if len(_fmt_number(plo)) <= 8 and len(_fmt_number(phi)) <= 8 and plo < phi:
            return plo, phi
    raise PhysicalRangeError("<auto>", 0, hi)


def digital_to_physical(d, sh: SignalHeader):
    """Apply the EDF calibration law to digital value(s) ``d``."""
    if sh.digital_max == sh.digital_min:
        raise CalibrationError(f"signal {sh.label!r}: digital_min == digital_max")
    v = sh.physical_min + (np.asarray(d, dtype=np.float64) - sh.digital_min) * sh.gain
    # rounding can push the end points one ulp outside the declared range
    lo, hi = sorted((sh.physical_min, sh.physical_max))
    return np.clip(v, lo, hi)


def physical_to_digital(v: np.ndarray, sh: SignalHeader) -> np.ndarray:
    d = np.rint((np.asarray(v, dtype=np.float64) - sh.physical_min) / sh.gain + sh.digital_min)
    return np.clip(d, sh.digital_min, sh.digital_max).astype("<i2")


# ---------------------------------------------------------------- reading


def _read_all(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    return source.read()


def _field_int(raw: bytes, offset: int, what: str) -> int:
    text = raw.decode("ascii", errors="replace").strip()
    try:
        return int(text)
    except ValueError:
        try:
            value = float(text)
        except ValueError:
            raise EdfHeaderError(f"{what}: {text!r} is not an integer", offset) from None
        if value != int(value):
            raise EdfHeaderError(f"{what}: {text!r} is not an integer", offset)
        return int(value)


def _field_float(raw: bytes, offset: int, what: str) -> float:
    text = raw.decode("ascii", errors="replace").strip()
    try:
        value = float(text)
    except ValueError:
        raise EdfHeaderError(f"{what}: {text!r} is not a number", offset) from None
    if not math.isfinite(value):
        raise EdfHeaderError(f"{what}: {text!r} is not finite", offset)
    return value


def _field_text(raw: bytes) -> str:
    return raw.decode("latin-1").rstrip(" ")


def read_edf(source: Source, *, with_sidecar: bool = False, standard: str = "AASM") -> PsgRecording:
    """Decode an EDF/EDF+ file into physical units.

    Parameters
    ----------
    source : bytes, binary file object or path
    with_sidecar : bool
        When ``source`` is a path, also load ``<name>.hyp`` if it exists.
    standard : {"AASM", "RK"}
        Scoring standard of the sidecar.
    """
    data = _read_all(source)
    if len(data) < 256:
        raise EdfStructureError(f"truncated main header: {len(data)} of 256 bytes present")

    main = {}
    offset = 0
    for name, width in _MAIN_FIELDS:
        main[name] = (data[offset : offset + width], offset)
        offset += width

    num_signals = _field_int(*main["num_signals"], "number of signals")
    header_bytes = _field_int(*main["header_bytes"], "header bytes")
    num_records = _field_int(*main["num_records"], "number of data records")
    record_duration = _field_float(*main["record_duration"], "data record duration")
    if num_signals < 1:
        raise EdfHeaderError("number of signals must be >= 1", main["num_signals"][1])
    if header_bytes != 256 * (num_signals + 1):
        raise EdfHeaderError(
            f"header bytes {header_bytes} inconsistent with {num_signals} signals",
            main["header_bytes"][1],
        )
    if record_duration <= 0:
        raise EdfHeaderError("data record duration must be positive", main["record_duration"][1])
    if len(data) < header_bytes:
        raise EdfStructureError(
            f"truncated signal headers: {len(data)} of {header_bytes} header bytes present"
        )

    raw_signals: list[dict] = [{} for _ in range(num_signals)]
    offset = 256
    for name, width in _SIGNAL_FIELDS:
        for i in range(num_signals):
            raw_signals[i][name] = (data[offset : offset + width], offset)
            offset += width

    spr = [
        _field_int(*raw_signals[i]["samples_per_record"], f"signal {i} samples per record")
        for i in range(num_signals)
    ]
    for i, n in enumerate(spr):
        if n < 1:
            raise EdfHeaderError(
                f"signal {i} samples per record must be >= 1",
                raw_signals[i]["samples_per_record"][1],
            )
    record_bytes = 2 * sum(spr)
    payload = len(data) - header_bytes
    if num_records == -1:
        if payload % record_bytes:
            raise EdfStructureError(
                f"data section of {payload} bytes is not a whole number of "
                f"{record_bytes}-byte records"
            )
        num_records = payload // record_bytes
    elif num_records < 0:
        raise EdfHeaderError("number of data records must be >= 0 or -1", main["num_records"][1])
    elif payload < num_records * record_bytes:
        missing = payload // record_bytes + 1
        raise EdfStructureError(
            f"truncated data section: data record {missing} of {num_records} is "
            f"incomplete ({payload} of {num_records * record_bytes} bytes present)"
        )

    records = np.frombuffer(
        data, dtype="<i2", count=num_records * sum(spr), offset=header_bytes
    ).reshape(num_records, sum(spr))

    channels = []
    start = 0
    for i in range(num_signals):
        fields = raw_signals[i]
        label = _field_text(fields["label"][0]).strip()
        stop = start + spr[i]
        if label == ANNOTATION_LABEL:
            start = stop
            continue
        sh = SignalHeader(
            label=label,
            transducer=_field_text(fields["transducer"][0]),
            physical_dimension=_field_text(fields["physical_dimension"][0]),
            physical_min=_field_float(*fields["physical_min"], f"signal {i} physical min"),
            physical_max=_field_float(*fields["physical_max"], f"signal {i} physical max"),
            digital_min=_field_int(*fields["digital_min"], f"signal {i} digital min"),
            digital_max=_field_int(*fields["digital_max"], f"signal {i} digital max"),
            prefilter=_field_text(fields["prefilter"][0]),
            samples_per_record=spr[i],
            reserved=_field_text(fields["reserved"][0]),
        )
        if sh.digital_min == sh.digital_max:
            raise CalibrationError(f"signal {label!r}: digital_min == digital_max")
        if sh.physical_min == sh.physical_max:
            raise CalibrationError(f"signal {label!r}: physical_min == physical_max")
        digital = records[:, start:stop].reshape(-1)
        channels.append(Channel(sh, digital_to_physical(digital, sh)))
        start = stop

    if not channels:
        raise EdfStructureError("file contains no signal channels")
    header = EdfHeader(
        version=_field_text(main["version"][0]),
        patient_id=_field_text(main["patient_id"][0]),
        recording_id=_field_text(main["recording_id"][0]),
        start_date=_field_text(main["start_date"][0]),
        start_time=_field_text(main["start_time"][0]),
        header_bytes=256 * (len(channels) + 1),
        reserved=_field_text(main["reserved"][0]),
        num_records=num_records,
        record_duration=record_duration,
        num_signals=len(channels),
    )
    name = ""
    hyp = None
    if isinstance(source, (str, os.PathLike)):
        name = Path(source).stem
        if with_sidecar and sidecar_path(source).exists():
            hyp = read_hypnogram(sidecar_path(source), standard)
    return PsgRecording(header, tuple(channels), hyp, name)


# ---------------------------------------------------------------- writing


def _fmt_number(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    text = repr(float(value))
    if "e" in text:
        text = f"{value:.8f}".rstrip("0")
    return text


def _pad(text: str, width: int, what: str) -> bytes:
    raw = text.encode("latin-1")
    if len(raw) > width:
        raise EdfStructureError(f"{what}: {text!r} does not fit in {width} characters")
    return raw.ljust(width, b" ")


def write_edf(rec: PsgRecording, dest: str | os.PathLike | BinaryIO | None = None) -> bytes:
    """Encode ``rec`` as EDF bytes; also write them to ``dest`` if given.

    Raises :class:`PhysicalRangeError` when a sample falls outside its
    channel's declared physical range. Values are never clipped.
    """
    h = rec.header
    if not rec.channels:
        raise EdfStructureError("cannot write a recording without signals")
    ns = len(rec.channels)
    for ch in rec.channels:
        sh = ch.header
        if sh.digital_min >= sh.digital_max:
            raise CalibrationError(f"signal {sh.label!r}: digital_min must be < digital_max")
        if sh.physical_min == sh.physical_max:
            raise CalibrationError(f"signal {sh.label!r}: physical_min == physical_max")
        lo, hi = sorted((sh.physical_min, sh.physical_max))
        bad = np.flatnonzero((ch.samples < lo) | (ch.samples > hi))
        if bad.size:
            raise PhysicalRangeError(sh.label, int(bad[0]), float(ch.samples[bad[0]]))

    out = io.BytesIO()
    main_values = {
        "version": h.version,
        "patient_id": h.patient_id,
        "recording_id": h.recording_id,
        "start_date": h.start_date,
        "start_time": h.start_time,
        "header_bytes": str(256 * (ns + 1)),
        "reserved": h.reserved,
        "num_records": str(h.num_records),
        "record_duration": _fmt_number(h.record_duration),
        "num_signals": str(ns),
    }
    for name, width in _MAIN_FIELDS:
        out.write(_pad(main_values[name], width, name))
    for name, width in _SIGNAL_FIELDS:
        for ch in rec.channels:
            value = getattr(ch.header, name)
            text = _fmt_number(value) if isinstance(value, (int, float)) else value
            out.write(_pad(text, width, f"{ch.label}.{name}"))

    columns = [physical_to_digital(ch.samples, ch.header).reshape(h.num_records, -1)
               for ch in rec.channels]
    out.write(np.concatenate(columns, axis=1).astype("<i2").tobytes())
    blob = out.getvalue()
    if dest is not None:
        if isinstance(dest, (str, os.PathLike)):
            Path(dest).write_bytes(blob)
        else:
            dest.write(blob)
    return blob


# ---------------------------------------------------------------- montage

Derivation = Union[str, tuple[str, str]]


@dataclass(frozen=True)
class MontageSpec:
    """Four mandatory derivations plus an optional ECG reference.

    A derivation is either one channel label or a pair ``(a, b)`` read as
    ``a - b``.
    """

    eeg1: Derivation
    eeg2: Derivation
    emg: Derivation
    eog: Derivation
    ecg: Derivation | None = None

    def derivations(self) -> list[Derivation]:
        out = [self.eeg1, self.eeg2, self.emg, self.eog]
        if self.ecg is not None:
            out.append(self.ecg)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> MontageSpec:
        def conv(v):
            if v is None or isinstance(v, str):
                return v
            if len(v) != 2:
                raise MontageError(f"derivation {v!r} must be a label or a pair of labels")
            return (v[0], v[1])

        missing = [k for k in ("eeg1", "eeg2", "emg", "eog") if k not in d]
        if missing:
            raise MontageError(f"montage lacks derivations: {', '.join(missing)}")
        return cls(**{k: conv(d.get(k)) for k in ("eeg1", "eeg2", "emg", "eog", "ecg")})

    def to_dict(self) -> dict:
        def conv(v):
            return list(v) if isinstance(v, tuple) else v

        return {k: conv(getattr(self, k)) for k in ("eeg1", "eeg2", "emg", "eog", "ecg")}


def _resolve_label(labels: list[str], wanted: str) -> int:
    for i, lab in enumerate(labels):
        if lab == wanted:
            return i
    folded = wanted.strip().casefold()
    hits = [i for i, lab in enumerate(labels) if lab.strip().casefold() == folded]
    if len(hits) == 1:
        return hits[0]
    raise MontageError(f"label {wanted!r} not found; available: {labels}")


def derivation_name(d: Derivation) -> str:
    return d if isinstance(d, str) else f"{d[0]}-{d[1]}"


def select_montage(rec: PsgRecording, spec: MontageSpec) -> PsgRecording:
    """Return a recording holding exactly [EEG1, EEG2, EMG, EOG] (+ ECG)."""
    labels = rec.labels
    out = []
    for d in spec.derivations():
        if isinstance(d, str):
            out.append(rec.channels[_resolve_label(labels, d)])
            continue
        a = rec.channels[_resolve_label(labels, d[0])]
        b = rec.channels[_resolve_label(labels, d[1])]
        if a.header.samples_per_record != b.header.samples_per_record:
            raise MontageError(
                f"cannot derive {derivation_name(d)}: sampling rates differ "
                f"({a.header.samples_per_record} vs {b.header.samples_per_record} "
                "samples per record)"
            )
        values = a.samples - b.samples
        sh = replace(
            a.header,
            label=derivation_name(d)[:16],
            physical_min=a.header.physical_min - b.header.physical_max,
            physical_max=a.header.physical_max - b.header.physical_min,
        )
        out.append(Channel(sh, values))
    header = replace(rec.header, num_signals=len(out), header_bytes=256 * (len(out) + 1))
    return PsgRecording(header, tuple(out), rec.hypnogram, rec.name)
