"""Signal homogenization: filtering, resampling, epoching, standardization.

All filters run at the original sampling rate. The canonical order is
notch -> ECG cancellation -> EMG high-pass -> resample -> segment ->
standardize (see :func:`preprocess`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import DataError, FilterDesignError

log = logging.getLogger(__name__)

TARGET_FS = 100
EPOCH_SAMPLES = 3000
N_INPUT_CHANNELS = 4  # EEG1, EEG2, EMG, EOG
EMG_ROW = 2

NOTCH_Q = 25.0
LMS_TAPS_SECONDS = 0.1
LMS_MU = 0.05
LMS_EPS = 1e-8
STD_GUARD = 1e-12


@dataclass(frozen=True)
class FilterConfig:
    enabled: bool = False
    mains_hz: float = 50.0
    emg_highpass_hz: float = 15.0
    ecg_cancellation: bool = True  # only acts when an ECG derivation is present

    def __post_init__(self):
        if self.mains_hz not in (50, 60):
            raise FilterDesignError(f"mains frequency must be 50 or 60 Hz, got {self.mains_hz}")
        if not self.emg_highpass_hz > 0:
            raise FilterDesignError("EMG high-pass cut-off must be positive")


# ---------------------------------------------------------------- resampling


def _anti_alias_taps(up: int, down: int, fs_in: float) -> np.ndarray:
    """Kaiser windowed-sinc low-pass on the upsampled grid.

    Passband edge 0.9 * min(50, fs_in / 2) Hz, stopband edge min(50, fs_in / 2)
    Hz, 60 dB. Each polyphase branch is normalized to unit DC gain so constant
    inputs come out exactly constant.
    """
    fs_up = fs_in * up
    stop = min(TARGET_FS / 2, fs_in / 2)
    passband = 0.9 * stop
    numtaps, beta = sps.kaiserord(60.0, (stop - passband) / (fs_up / 2))
    numtaps |= 1
    h = sps.firwin(numtaps, (stop + passband) / 2, window=("kaiser", beta), fs=fs_up)
    for r in range(up):
        h[r::up] /= h[r::up].sum() * up
    return h


def resample(x: np.ndarray, fs_in: float, fs_out: float = TARGET_FS) -> np.ndarray:
    """Rational polyphase resampling to ``fs_out`` (100 Hz by default).

    Output length is ``round(len(x) * fs_out / fs_in)``. Upsampling is
    allowed but logged, since the source then lacks the 0-50 Hz band.
    """
    if not fs_in > 0:
        raise ValueError(f"sampling rate must be positive, got {fs_in}")
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(x.size * fs_out / fs_in))
    if fs_in == fs_out:
        return x.copy()
    if fs_in < fs_out:
        log.warning("upsampling from %s Hz to %s Hz", fs_in, fs_out)
    ratio = Fraction(fs_out / fs_in).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    h = _anti_alias_taps(up, down, fs_in)
    y = sps.resample_poly(x, up, down, window=h, padtype="line")
    if y.size >= n_out:
        return y[:n_out]
    return np.concatenate([y, np.full(n_out - y.size, y[-1] if y.size else 0.0)])


# ---------------------------------------------------------------- filters


def _lfilter_steady(b, a, x: np.ndarray) -> np.ndarray:
    # initial state scaled by x[0]: linear in x, and exact for DC input
    zi = sps.lfilter_zi(b, a) * (x[0] if x.size else 0.0)
    y, _ = sps.lfilter(b, a, x, zi=zi)
    return y


def notch_coefficients(fs: float, mains_hz: float, q: float = NOTCH_Q):
    if not 0 < mains_hz < fs / 2:
        raise FilterDesignError(f"notch at {mains_hz} Hz is not below Nyquist ({fs / 2} Hz)")
    return sps.iirnotch(mains_hz, q, fs=fs)


def notch_filter(x: np.ndarray, fs: float, mains_hz: float) -> np.ndarray:
    """Second-order IIR notch (Q = 25) at the mains frequency."""
    b, a = notch_coefficients(fs, mains_hz)
    return _lfilter_steady(b, a, np.asarray(x, dtype=np.float64))


def highpass_coefficients(fs: float, cutoff: float):
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"high-pass cut-off {cutoff} Hz must lie in (0, {fs / 2}) Hz")
    return sps.butter(1, cutoff, btype="highpass", fs=fs)


def highpass_emg(x: np.ndarray, fs: float, cutoff: float = 15.0) -> np.ndarray:
    """First-order (bilinear Butterworth) high-pass for the chin EMG."""
    b, a = highpass_coefficients(fs, cutoff)
    x = np.asarray(x, dtype=np.float64)
    # steady state for a constant input of a high-pass is zero output
    zi = sps.lfilter_zi(b, a) * (x[0] if x.size else 0.0)
    y, _ = sps.lfilter(b, a, x, zi=zi)
    return y


def ecg_cancel(target: np.ndarray, ecg: np.ndarray, fs: float) -> np.ndarray:
    """Remove the ECG-correlated part of ``target`` with a normalized LMS canceller.

    The reference is a tapped delay line covering 0.1 s of ``ecg``; the step is
    ``0.05 / (1e-8 + |u|^2)`` with ``u`` the current tap vector.
    """
    target = np.asarray(target, dtype=np.float64)
    ecg = np.asarray(ecg, dtype=np.float64)
    if target.shape != ecg.shape:
        raise ValueError(f"target and ECG lengths differ: {target.shape} vs {ecg.shape}")
    if not np.any(ecg):
        return target.copy()
    taps = max(1, int(round(LMS_TAPS_SECONDS * fs)))
    return _nlms(target, ecg, taps, LMS_MU, LMS_EPS)


def _nlms_py(d, u, taps, mu, eps):
    n = d.size
    w = np.zeros(taps)
    buf = np.zeros(taps)
    out = np.empty(n)
    power = 0.0
    for i in range(n):
        old = buf[taps - 1]
        buf[1:] = buf[:-1]
        buf[0] = u[i]
        power += u[i] * u[i] - old * old
        if power < 0.0:
            power = 0.0
        e = d[i] - np.dot(w, buf)
        out[i] = e
        w += (mu / (eps + power)) * e * buf
    return out


try:
    import numba

    _nlms_jit = numba.njit(cache=True)(_nlms_py)
except ImportError:  # pragma: no cover
    _nlms_jit = None


def _nlms(d, u, taps, mu, eps):
    if _nlms_jit is not None:
        return _nlms_jit(d, u, taps, mu, eps)
    return _nlms_py(d, u, taps, mu, eps)  # pragma: no cover


# ---------------------------------------------------------------- epochs


def segment_epochs(signals: np.ndarray) -> np.ndarray:
    """Cut a (4, T) array at 100 Hz into (M, 4, 3000) raw epochs.

    The trailing partial epoch is dropped; epoch ``m`` of the result is
    epoch index ``m + 1``.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2:
        raise DataError(f"expected a (channels, samples) array, got shape {signals.shape}")
    c, t = signals.shape
    m = t // EPOCH_SAMPLES
    if m == 0:
        log.warning("signal of %d samples is shorter than one 30 s epoch", t)
    return (
        signals[:, : m * EPOCH_SAMPLES]
        .reshape(c, m, EPOCH_SAMPLES)
        .transpose(1, 0, 2)
        .copy()
    )


def standardize(raw: np.ndarray, pooled: bool = False) -> np.ndarray:
    """Z-score each row (last axis) with the population standard deviation.

    Works on a single (4, T) pattern or any stack ``(..., 4, T)``. Rows whose
    std is below 1e-12 become zeros. ``pooled=True`` uses one mean/std over
    the whole (4, T) pattern instead of per row.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("cannot standardize non-finite samples")
    axes = (-2, -1) if pooled else (-1,)
    mu = raw.mean(axis=axes, keepdims=True)
    centred = raw - mu
    sd = np.sqrt(np.mean(centred * centred, axis=axes, keepdims=True))
    safe = np.where(sd < STD_GUARD, 1.0, sd)
    return np.where(sd < STD_GUARD, 0.0, centred / safe)


# ---------------------------------------------------------------- pipeline


@dataclass
class Preprocessed:
    """Derived signals at 100 Hz, cut into raw (unstandardized) epochs."""

    epochs: np.ndarray  # (M, 4, 3000)
    source_fs: tuple[float, ...]
    upsampled: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]


def apply_filters(
    signals: list[np.ndarray],
    rates: list[float],
    config: FilterConfig,
    ecg: np.ndarray | None = None,
    ecg_fs: float | None = None,
) -> list[np.ndarray]:
    """Run notch -> ECG cancellation -> EMG high-pass on the four derivations."""
    out = []
    ecg_ref = None
    if ecg is not None and config.ecg_cancellation:
        ecg_ref = notch_filter(ecg, ecg_fs, config.mains_hz)
    for row, (x, fs) in enumerate(zip(signals, rates)):
        y = notch_filter(x, fs, config.mains_hz)
        if ecg_ref is not None:
            if fs == ecg_fs:
                y = ecg_cancel(y, ecg_ref, fs)
            else:
                ref = resample(ecg_ref, ecg_fs, fs)
                y = ecg_cancel(y, ref[: y.size], fs) if ref.size == y.size else y
        if row == EMG_ROW:
            y = highpass_emg(y, fs, config.emg_highpass_hz)
        out.append(y)
    return out


def preprocess(montaged, config: FilterConfig | None = None) -> Preprocessed:
    """Montaged recording -> raw 100 Hz epochs, filtering first when enabled."""
    chans = montaged.channels
    if len(chans) not in (4, 5):
        raise DataError(f"expected 4 or 5 derived channels, got {len(chans)}")
    rates = [montaged.fs(i) for i in range(len(chans))]
    signals = [np.asarray(c.samples) for c in chans[:4]]
    if config is not None and config.enabled:
        ecg = chans[4].samples if len(chans) == 5 else None
        ecg_fs = rates[4] if len(chans) == 5 else None
        signals = apply_filters(signals, rates[:4], config, ecg, ecg_fs)
    resampled = [resample(x, fs) for x, fs in zip(signals, rates[:4])]
    n = min(r.size for r in resampled)
    stacked = np.stack([r[:n] for r in resampled])
    notes = []
    up = any(fs < TARGET_FS for fs in rates[:4])
    if up:
        notes.append("upsampled from below 100 Hz")
    return Preprocessed(segment_epochs(stacked), tuple(rates[:4]), up, notes)
