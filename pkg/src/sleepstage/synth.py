"""Synthetic polysomnography databases with stage-dependent signal recipes.

Each recording is a Markov chain of stages rendered into six electrodes
(C4, O2, a shared M1 reference, chin EMG, EOG and ECG) and written as EDF
with a ``.hyp`` label sidecar. The recipes are caricatures meant to make
stages separable, not clinically realistic:

=====  ============================================  ==========  ================
stage  EEG                                           EMG         EOG
=====  ============================================  ==========  ================
W      10 Hz alpha (strongest occipital)             high        blinks, saccades
N1     5 Hz theta                                    medium      slow rolling
N2     theta + 13 Hz spindle bursts                  low         quiet
N3     1.5 Hz high-amplitude delta                   low         delta pickup
R      theta                                         lowest      large slow REMs
=====  ============================================  ==========  ================

Heartbeats leak into the EEG and EMG electrodes and every electrode carries
mains interference, so the optional filters have something to remove.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .edfio import MontageSpec, PsgRecording, write_edf
from .errors import ConfigError
from .stages import EPOCH_SECONDS, Hypnogram, Stage

W, N1, N2, N3, R = (int(s) for s in (Stage.W, Stage.N1, Stage.N2, Stage.N3, Stage.R))

DEFAULT_TRANSITIONS = (
    (0.85, 0.10, 0.03, 0.00, 0.02),
    (0.05, 0.72, 0.18, 0.00, 0.05),
    (0.03, 0.03, 0.80, 0.09, 0.05),
    (0.02, 0.00, 0.12, 0.86, 0.00),
    (0.05, 0.05, 0.06, 0.00, 0.84),
)

SYNTH_MONTAGE = MontageSpec(
    eeg1=("C4", "M1"), eeg2=("O2", "M1"), emg="EMG chin", eog="EOG", ecg="ECG"
)
GROUPS = ("eeg", "emg", "eog", "ecg")

_EMG_RMS = {W: 25.0, N1: 12.0, N2: 7.0, N3: 6.0, R: 2.0}
_RK_NAMES = {W: "W", N1: "S1", N2: "S2", R: "R"}


@dataclass(frozen=True)
class SynthDbSpec:
    """Parameters of one synthetic database.

    ``gain`` scales each electrode group (``eeg``, ``emg``, ``eog``, ``ecg``);
    a float applies to all groups. ``movement_fraction`` is the chance that an
    epoch is replaced by a movement artefact scored ``MT``.
    """

    id: str
    n_recordings: int = 12
    epochs_per_recording: int = 120
    fs: float = 200.0
    gain: float | dict = 1.0
    mains_hz: float = 50.0
    transitions: tuple = DEFAULT_TRANSITIONS
    initial_stage: int = W
    noise: float = 5.0
    transition_blend: float = 0.4
    movement_fraction: float = 0.0
    standard: str = "AASM"
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (5, 5) or np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("transition matrix must be 5x5, non-negative, rows summing to 1")
        if any(g <= 0 for g in self.gains.values()):
            raise ConfigError("gains must be positive")
        if self.n_recordings < 1 or self.epochs_per_recording < 1:
            raise ConfigError("need at least one recording of at least one epoch")
        if abs(self.fs - round(self.fs)) > 1e-9:
            raise ConfigError("sampling rate must be a whole number of Hz")
        if self.mains_hz >= self.fs / 2:
            raise ConfigError("mains frequency must lie below Nyquist")
        if self.standard not in ("AASM", "RK"):
            raise ConfigError(f"unknown scoring standard {self.standard!r}")

    @property
    def gains(self) -> dict[str, float]:
        if isinstance(self.gain, dict):
            unknown = set(self.gain) - set(GROUPS)
            if unknown:
                raise ConfigError(f"unknown gain groups {sorted(unknown)}")
            return {g: float(self.gain.get(g, 1.0)) for g in GROUPS}
        return {g: float(self.gain) for g in GROUPS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transitions"] = [list(r) for r in self.transitions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthDbSpec:
        d = dict(d)
        if "transitions" in d:
            d["transitions"] = tuple(tuple(r) for r in d["transitions"])
        return cls(**d)


def markov_stages(transitions, initial: int, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.cumsum(np.asarray(transitions, dtype=np.float64), axis=1)
    out = np.empty(n, dtype=np.int64)
    s = int(initial)
    for i in range(n):
        out[i] = s
        s = min(int(np.searchsorted(t[s], rng.random(), side="right")), 4)
    return out


# ---------------------------------------------------------------- recipes


def _tone(t, f, amp, rng, jitter=0.08):
    f = f * (1 + jitter * (2 * rng.random() - 1))
    return amp * (0.8 + 0.4 * rng.random()) * np.sin(2 * np.pi * f * t + 2 * np.pi * rng.random())


def _bursts(t, f, amp, count, width, rng):
    out = np.zeros_like(t)
    for c in rng.uniform(t[0] + 1, t[-1] - 1, size=count):
        out += np.exp(-0.5 * ((t - c) / width) ** 2) * np.sin(2 * np.pi * f * (t - c))
    return amp * out


def _band_noise(n, fs, lo, hi, rms, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spec[(freqs < lo) | (freqs > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x * (rms / max(np.std(x), 1e-12))


def _eye_movements(t, amp, count, width, rng):
    out = np.zeros_like(t)
    for c in rng.uniform(t[0], t[-1], size=count):
        out += rng.choice((-1.0, 1.0)) * np.tanh((t - c) / width) * np.exp(-np.abs(t - c) / (6 * width))
    return amp * out


def stage_epoch(stage: int, t: np.ndarray, fs: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Noise-free stage content of one epoch: central EEG, occipital EEG, EMG, EOG."""
    n = t.size
    zero = np.zeros(n)
    if stage == W:
        eeg1 = _tone(t, 10, 15, rng) + _band_noise(n, fs, 15, 30, 4, rng)
        eeg2 = _tone(t, 10, 35, rng) + _band_noise(n, fs, 15, 30, 4, rng)
        eog = _eye_movements(t, 60, 6, 0.05, rng)
    elif stage == N1:
        eeg1 = _tone(t, 5, 25, rng)
        eeg2 = _tone(t, 5, 20, rng)
        eog = _tone(t, 0.3, 50, rng)
    elif stage == N2:
        eeg1 = _tone(t, 5, 18, rng) + _bursts(t, 13, 45, 3, 0.3, rng)
        eeg2 = _tone(t, 5, 15, rng) + _bursts(t, 13, 25, 3, 0.3, rng)
        eog = zero
    elif stage == N3:
        eeg1 = _tone(t, 1.5, 90, rng) + _tone(t, 0.8, 40, rng)
        eeg2 = _tone(t, 1.5, 70, rng) + _tone(t, 0.8, 30, rng)
        eog = _tone(t, 1.5, 35, rng)
    elif stage == R:
        eeg1 = _tone(t, 5, 20, rng)
        eeg2 = _tone(t, 5, 15, rng)
        eog = _eye_movements(t, 150, 8, 0.4, rng)
    else:
        raise ValueError(f"no recipe for stage {stage}")
    emg = _band_noise(n, fs, 20, min(45, fs / 2 - 1), _EMG_RMS[stage], rng)
    return {"eeg1": eeg1, "eeg2": eeg2, "emg": emg, "eog": eog}


def _movement_epoch(t, fs, rng):
    n = t.size
    return {k: _band_noise(n, fs, 0.5, min(45, fs / 2 - 1), 200, rng) for k in ("eeg1", "eeg2", "emg", "eog")}


def _heartbeats(total_s: float, fs: float, rng) -> np.ndarray:
    n = int(round(total_s * fs))
    t = np.arange(n) / fs
    out = np.zeros(n)
    beat = rng.uniform(0, 1)
    period = rng.uniform(0.8, 1.1)
    width = 0.015
    while beat < total_s:
        lo, hi = int((beat - 5 * width) * fs), int((beat + 5 * width) * fs) + 1
        lo, hi = max(lo, 0), min(hi, n)
        out[lo:hi] += np.exp(-0.5 * ((t[lo:hi] - beat) / width) ** 2)
        beat += period * (1 + 0.05 * rng.standard_normal())
    return out


def synth_recording(spec: SynthDbSpec, stages: np.ndarray, rng: np.random.Generator,
                    movement: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Render a stage sequence into electrode signals in microvolts (before gain)."""
    fs = spec.fs
    n_ep = int(round(EPOCH_SECONDS * fs))
    m = len(stages)
    movement = np.zeros(m, dtype=bool) if movement is None else movement
    t_ep = np.arange(n_ep) / fs
    parts = {k: [] for k in ("eeg1", "eeg2", "emg", "eog")}
    for i, s in enumerate(stages):
        if movement[i]:
            ep = _movement_epoch(t_ep, fs, rng)
        else:
            ep = stage_epoch(int(s), t_ep, fs, rng)
            if i > 0 and stages[i - 1] != s and spec.transition_blend > 0:
                prev = stage_epoch(int(stages[i - 1]), t_ep, fs, rng)
                a = spec.transition_blend
                ep = {k: (1 - a) * ep[k] + a * prev[k] for k in ep}
        for k in parts:
            parts[k].append(ep[k])
    sig = {k: np.concatenate(v) for k, v in parts.items()}
    total = m * EPOCH_SECONDS
    n = sig["eeg1"].size
    t = np.arange(n) / fs
    ecg = _heartbeats(total, fs, rng)
    noise = lambda: spec.noise * rng.standard_normal(n)  # noqa: E731
    mains = lambda amp: amp * np.sin(2 * np.pi * spec.mains_hz * t + 2 * np.pi * rng.random())  # noqa: E731
    ref = 15 * np.sin(2 * np.pi * 0.2 * t + 2 * np.pi * rng.random()) + noise() + mains(5)
    g = spec.gains
    return {
        "C4": g["eeg"] * (sig["eeg1"] + ref + 8 * ecg + noise() + mains(15)),
        "O2": g["eeg"] * (sig["eeg2"] + ref + 5 * ecg + noise() + mains(10)),
        "M1": g["eeg"] * ref,
        "EMG chin": g["emg"] * (sig["emg"] + 10 * ecg + 0.3 * noise() + mains(10)),
        "EOG": g["eog"] * (sig["eog"] + noise() + mains(10)),
        "ECG": g["ecg"] * (800 * ecg + 0.5 * noise() + mains(20)),
    }


# ---------------------------------------------------------------- databases


@dataclass
class DatabaseSpec:
    """A database on disk: EDF recordings with ``.hyp`` sidecars and how to read them."""

    id: str
    recordings: list[str]
    montage: MontageSpec
    mains_hz: float = 50.0
    standard: str = "AASM"
    root: str = ""

    def paths(self) -> list[Path]:
        base = Path(self.root)
        return [p if Path(p).is_absolute() else base / p for p in map(Path, self.recordings)]

    def to_dict(self) -> dict:
        return {"id": self.id, "recordings": list(self.recordings), "montage": self.montage.to_dict(),
                "mains_hz": self.mains_hz, "standard": self.standard}

    @classmethod
    def from_dict(cls, d: dict, root: str | os.PathLike = "") -> DatabaseSpec:
        try:
            return cls(d["id"], list(d["recordings"]), MontageSpec.from_dict(d["montage"]),
                       float(d.get("mains_hz", 50.0)), d.get("standard", "AASM"), str(root))
        except KeyError as exc:
            raise ConfigError(f"database description lacks {exc}") from None

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatabaseSpec:
        path = Path(path)
        if path.is_dir():
            path = path / "database.json"
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read database description {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d, path.parent)


def _label_lines(stages: np.ndarray, movement: np.ndarray, standard: str, rng) -> list[str]:
    out = []
    for s, mv in zip(stages, movement):
        if mv:
            out.append("MT")
        elif standard == "RK":
            out.append(("S3", "S4")[int(rng.random() < 0.5)] if s == N3 else _RK_NAMES[int(s)])
        else:
            out.append(Stage(int(s)).name)
    return out


def synth_database(spec: SynthDbSpec, out_dir: str | os.PathLike) -> DatabaseSpec:
    """Write ``spec.n_recordings`` EDF files plus sidecars and a ``database.json``.

    Output is a pure function of ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence([spec.seed, *spec.id.encode()])
    names = []
    for i, child in enumerate(root.spawn(spec.n_recordings)):
        rng = np.random.default_rng(child)
        stages = markov_stages(spec.transitions, spec.initial_stage, spec.epochs_per_recording, rng)
        movement = rng.random(len(stages)) < spec.movement_fraction
        signals = synth_recording(spec, stages, rng, movement)
        name = f"{spec.id}_{i + 1:02d}"
        hyp_stages = np.where(movement, int(Stage.UNSCORED), stages)
        rec = PsgRecording.from_signals(
            {k: (v, spec.fs) for k, v in signals.items()},
            record_duration=1.0,
            hypnogram=Hypnogram(hyp_stages),
            name=name,
            patient_id=name,
            recording_id=f"synthetic {spec.id}",
        )
        edf = out / f"{name}.edf"
        write_edf(rec, edf)
        lines = _label_lines(stages, movement, spec.standard, rng)
        (out / f"{name}.hyp").write_text("".join(x + "\n" for x in lines), encoding="ascii")
        names.append(edf.name)
    db = DatabaseSpec(spec.id, names, SYNTH_MONTAGE, spec.mains_hz, spec.standard, str(out))
    db.save(out / "database.json")
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return db


__all__ = [
    "DEFAULT_TRANSITIONS",
    "DatabaseSpec",
    "SYNTH_MONTAGE",
    "SynthDbSpec",
    "markov_stages",
    "stage_epoch",
    "synth_database",
    "synth_recording",
]
