"""The CNN and CNN-LSTM staging networks and whole-recording scoring."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import dsp
from .errors import ConfigError, ModeError, ShapeError
from .neural import functional as F
from .neural import layers as nl
from .neural import serialize
from .stages import N_CLASSES, Hypnogram

CNN_ONLY = "CNN_ONLY"
CNN_LSTM = "CNN_LSTM"
VALID_L = (1, 3, 5, 7)

_NAME_RE = re.compile(r"^CNN(_LSTM)?(_F)?_(\d+)$")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = CNN_ONLY
    L: int = 1
    filtering: bool = False
    n_blocks: int = 3
    base_filters: int = 8
    feature_size: int = 50
    lstm_hidden: int = 100
    n_classes: int = N_CLASSES
    kernel_width: int = 100
    epoch_samples: int = dsp.EPOCH_SAMPLES
    n_rows: int = dsp.N_INPUT_CHANNELS
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in (CNN_ONLY, CNN_LSTM):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.L not in VALID_L:
            raise ConfigError(f"sequence length must be one of {VALID_L}, got {self.L}")
        if self.kind == CNN_LSTM and self.L < 3:
            raise ConfigError("CNN_LSTM variants need L >= 3")
        if self.input_width < 2**self.n_blocks:
            raise ConfigError("input too narrow for the pooling chain")

    @property
    def name(self) -> str:
        parts = ["CNN"]
        if self.kind == CNN_LSTM:
            parts.append("LSTM")
        if self.filtering:
            parts.append("F")
        parts.append(str(self.L))
        return "_".join(parts)

    @property
    def input_width(self) -> int:
        """Width of one CNN input pattern."""
        return self.epoch_samples * (self.L if self.kind == CNN_ONLY else 1)

    def filters(self) -> list[int]:
        return [self.base_filters * 2**i for i in range(self.n_blocks)]

    def widths(self) -> list[int]:
        """Activation width at the input and after every pooling step."""
        out = [self.input_width]
        for _ in range(self.n_blocks):
            out.append(out[-1] // 2)
        return out

    @property
    def flat_size(self) -> int:
        return self.filters()[-1] * self.n_rows * self.widths()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


ALL_CONFIG_NAMES = tuple(
    [f"CNN_{L}" for L in VALID_L]
    + [f"CNN_F_{L}" for L in VALID_L]
    + [f"CNN_LSTM_{L}" for L in VALID_L[1:]]
    + [f"CNN_LSTM_F_{L}" for L in VALID_L[1:]]
)


def parse_config_name(text: str, **overrides) -> ModelConfig:
    """Parse one of the 14 variant names (``CNN_1`` ... ``CNN_LSTM_F_7``)."""
    m = _NAME_RE.match(text.strip())
    if not m or text.strip() not in ALL_CONFIG_NAMES:
        raise ConfigError(
            f"unknown model configuration {text!r}; valid names: {', '.join(ALL_CONFIG_NAMES)}"
        )
    kind = CNN_LSTM if m.group(1) else CNN_ONLY
    return ModelConfig(kind=kind, L=int(m.group(3)), filtering=bool(m.group(2)), **overrides)


# ---------------------------------------------------------------- model


class StagingModel:
    """A built network plus its configuration.

    The whole network is one :class:`~sleepstage.neural.layers.Sequential`.
    The layer named ``feature`` emits the 50-dimensional epoch feature
    vector; for CNN_LSTM models a reshape then regroups features into
    ``(B, L, 50)`` sequences before the LSTM head.
    """

    def __init__(self, config: ModelConfig, net: nl.Sequential):
        self.config = config
        self.net = net
        self.mode = "infer"

    # mode -----------------------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def _require_infer(self):
        if self.mode != "infer":
            raise ModeError("classification requires inference mode; call model.eval()")

    # registry -------------------------------------------------------------

    def parameters(self):
        return self.net.parameters()

    def gradients(self):
        return self.net.gradients()

    def buffers(self):
        return self.net.buffers()

    def set_buffers(self, b):
        self.net.set_buffers(b)

    def state(self):
        return self.net.state()

    def kink_signature(self) -> bytes:
        return self.net.kink_signature()

    def load_state(self, state):
        self.net.load_state(state)

    def state_bytes(self) -> bytes:
        return serialize.dumps(self.config.to_dict(), self.state())

    def save(self, path) -> None:
        serialize.save(path, self.config.to_dict(), self.state())

    @classmethod
    def load(cls, path) -> StagingModel:
        return cls.from_bytes(open(path, "rb").read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> StagingModel:
        cfg, tensors = serialize.loads(blob)
        model = build_model(ModelConfig.from_dict(cfg), seed=0)
        model.load_state(tensors)
        return model

    # computation ----------------------------------------------------------

    def _as_input(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        if c.kind == CNN_ONLY:
            if x.shape[1:] != (c.n_rows, c.input_width):
                raise ShapeError(
                    f"{c.name} expects patterns of shape ({c.n_rows}, {c.input_width}), "
                    f"got {x.shape[1:]}"
                )
        elif x.shape[1:] != (c.L, c.n_rows, c.epoch_samples):
            raise ShapeError(
                f"{c.name} expects sequences of shape ({c.L}, {c.n_rows}, {c.epoch_samples}), "
                f"got {x.shape[1:]}"
            )
        return x

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        return self.net.forward(self._as_input(x), train, rng)

    def loss_and_backward(self, x, target, rng=None) -> float:
        return self.net.loss_and_backward(self._as_input(x), target, rng)

    def features(self, patterns: np.ndarray) -> np.ndarray:
        """(B, 4, epoch_samples) standardized epochs -> (B, 50) features."""
        c = self.config
        if patterns.shape[1:] != (c.n_rows, c.epoch_samples if c.kind == CNN_LSTM else c.input_width):
            raise ShapeError(f"bad pattern shape {patterns.shape[1:]} for {c.name}")
        x = patterns[:, None] if c.kind == CNN_LSTM else patterns
        return self.net.forward(x, train=False, upto="feature")

    def head(self, feature_seqs: np.ndarray) -> np.ndarray:
        """(B, L, 50) feature sequences -> (B, 5) logits (CNN_LSTM only)."""
        return self.net.forward(feature_seqs, train=False, start="lstm")


def build_model(config: ModelConfig, seed: int = 0, fused: bool = True) -> StagingModel:
    """Initialize a model; identical seeds give bit-identical parameters.

    ``fused`` runs each ReLU -> batch norm -> pool triple as one layer; the
    unfused network has the same parameters and computes the same function.
    """
    rng = np.random.default_rng(seed)
    c = config
    layers: list[tuple[str, nl.Layer]] = []
    if c.kind == CNN_LSTM:
        layers.append(("unroll", nl.Unroll()))
    else:
        layers.append(("lift", nl.Lift()))
    layers.append(("tm", nl.ToTimeMajor()))
    c_in = 1
    widths = c.widths()
    for i, f in enumerate(c.filters(), start=1):
        w = widths[i - 1]
        conv = nl.Conv1xK(c_in, f, c.kernel_width, rng, first=(i == 1), width=w)
        if fused:
            last = i == c.n_blocks
            out_len = w // 2 if last else F.conv_plan(widths[i], c.kernel_width)[0]
            grad_len = F.conv_plan(w, c.kernel_width)[0]
            layers += [(f"conv{i}", conv), (f"bn{i}", nl.ReluBnPool(f, out_len, grad_len))]
        else:
            layers += [
                (f"conv{i}", conv),
                (f"relu{i}", nl.ReLU()),
                (f"bn{i}", nl.BatchNorm(f, axis=1)),
                (f"pool{i}", nl.AvgPool()),
            ]
        c_in = f
    layers.append(("flatten", nl.Flatten(c.n_rows)))
    layers.append(("feature", nl.Dense(c.flat_size, c.feature_size, rng)))
    if c.kind == CNN_ONLY:
        layers += [
            ("relu_head", nl.ReLU()),
            ("dropout", nl.Dropout(c.dropout)),
            ("out", nl.Dense(c.feature_size, c.n_classes, rng)),
        ]
    else:
        layers += [
            ("regroup", nl.Regroup(c.L)),
            ("lstm", nl.LSTM(c.feature_size, c.lstm_hidden, rng)),
            ("last", nl.LastStep()),
            ("out", nl.Dense(c.lstm_hidden, c.n_classes, rng)),
        ]
    return StagingModel(config, nl.Sequential(layers))


def shape_trace(model: StagingModel) -> list[tuple[str, tuple[int, ...]]]:
    """Run one zero pattern through the model and record every layer's output shape.

    Time-major activations are reported as (maps, rows, width). The trace
    uses the unfused layer sequence so every ReLU, batch norm and pooling
    step appears separately.
    """
    c = model.config
    unfused = build_model(c, fused=False)
    unfused.load_state(model.state())
    model = unfused
    if c.kind == CNN_ONLY:
        x = np.zeros((1, c.n_rows, c.input_width))
    else:
        x = np.zeros((1, c.L, c.n_rows, c.epoch_samples))
    trace = []
    for name, layer in model.net:
        x = layer.forward(x, train=False)
        shape = x.shape
        if name.startswith(("conv", "relu", "bn", "pool")) and x.ndim == 3 and name != "relu_head":
            shape = (shape[1], c.n_rows, shape[0])
        trace.append((name, tuple(shape)))
    return trace


# ---------------------------------------------------------------- sequences


def sequence_indices(k: int, m: int, length: int) -> np.ndarray:
    """1-based epoch indices of the window around epoch ``k`` (clamped to [1, m]).

    Runs from ``k - ceil((L-1)/2)`` to ``k + floor((L-1)/2)``, so epoch ``k``
    sits at 1-based position ``ceil((L-1)/2) + 1``.
    """
    if not 1 <= k <= m:
        raise ValueError(f"epoch index {k} outside 1..{m}")
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    before = math.ceil((length - 1) / 2)
    after = (length - 1) // 2
    return np.clip(np.arange(k - before, k + after + 1), 1, m)


def build_sequence(features: np.ndarray, k: int, length: int) -> np.ndarray:
    """(M, D) features -> (L, D) sequence for 1-based epoch ``k``."""
    return features[sequence_indices(k, len(features), length) - 1]


def window_indices(m: int, length: int) -> np.ndarray:
    """(M, L) array of 0-based window indices for every epoch of a recording."""
    before = math.ceil((length - 1) / 2)
    offsets = np.arange(length) - before
    return np.clip(np.arange(m)[:, None] + offsets[None, :], 0, m - 1)


def assemble_inputs(config: ModelConfig, raw: np.ndarray, std: np.ndarray, centers) -> np.ndarray:
    """Network inputs for 0-based epoch ``centers`` of one recording.

    ``raw`` holds the unstandardized (M, 4, 3000) epochs and ``std`` their
    per-epoch standardized versions. CNN_ONLY with L > 1 concatenates raw
    neighbours along time and standardizes over the whole window.
    """
    centers = np.asarray(centers)
    m = raw.shape[0]
    if config.L == 1:
        return std[centers]
    win = window_indices(m, config.L)[centers]
    if config.kind == CNN_LSTM:
        return std[win]
    cat = raw[win].transpose(0, 2, 1, 3).reshape(len(centers), raw.shape[1], -1)
    return dsp.standardize(cat)


# ---------------------------------------------------------------- inference

_CHUNK = 64


def cnn_features(model: StagingModel, pattern: np.ndarray) -> np.ndarray:
    """Pre-activation output of the 50-unit feature layer for one pattern."""
    model._require_infer()
    return model.features(np.asarray(pattern, dtype=np.float64)[None])[0]


def cnn_classify(model: StagingModel, pattern: np.ndarray) -> np.ndarray:
    """Posterior over (W, N1, N2, N3, R) for one (4, 3000 L) pattern."""
    if model.config.kind != CNN_ONLY:
        raise ConfigError("cnn_classify needs a CNN_ONLY model")
    model._require_infer()
    return F.softmax(model.forward(np.asarray(pattern, dtype=np.float64)[None]))[0]


def lstm_classify(model: StagingModel, sequence: np.ndarray) -> np.ndarray:
    """Posterior for one (L, 50) feature sequence; the last LSTM state is read out."""
    if model.config.kind != CNN_LSTM:
        raise ConfigError("lstm_classify needs a CNN_LSTM model")
    model._require_infer()
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.shape != (model.config.L, model.config.feature_size):
        raise ShapeError(
            f"expected a ({model.config.L}, {model.config.feature_size}) sequence, "
            f"got {sequence.shape}"
        )
    return F.softmax(model.head(sequence[None]))[0]


def predict_label(posterior: np.ndarray) -> int:
    """Argmax; ties go to the earliest stage in W < N1 < N2 < N3 < R."""
    return int(np.argmax(posterior))


def epoch_posteriors(model: StagingModel, raw: np.ndarray, std: np.ndarray | None = None) -> np.ndarray:
    """(M, 5) posteriors for every epoch of one recording's raw 100 Hz epochs."""
    model._require_infer()
    c = model.config
    m = raw.shape[0]
    if m == 0:
        return np.zeros((0, c.n_classes))
    if std is None:
        std = dsp.standardize(raw)
    if c.kind == CNN_LSTM:
        feats = np.concatenate(
            [model.features(std[i : i + _CHUNK]) for i in range(0, m, _CHUNK)]
        )
        seqs = feats[window_indices(m, c.L)]
        return F.softmax(model.head(seqs))
    chunk = max(1, _CHUNK // c.L)
    out = []
    for i in range(0, m, chunk):
        centers = np.arange(i, min(m, i + chunk))
        out.append(F.softmax(model.forward(assemble_inputs(c, raw, std, centers))))
    return np.concatenate(out)


def score_recording(model: StagingModel, recording, filter_config: dsp.FilterConfig | None = None,
                    return_posteriors: bool = False):
    """Montaged recording -> hypnogram of length M (number of whole epochs).

    The model's own ``filtering`` flag decides whether the filter pipeline
    runs; ``filter_config`` supplies mains frequency and cut-offs.
    """
    fc = filter_config or dsp.FilterConfig()
    fc = replace(fc, enabled=model.config.filtering)
    pre = dsp.preprocess(recording, fc)
    post = epoch_posteriors(model, pre.epochs)
    hyp = Hypnogram(np.argmax(post, axis=1) if len(post) else np.zeros(0))
    return (hyp, post) if return_posteriors else hyp
