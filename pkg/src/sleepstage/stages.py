"""Sleep stage alphabet, hypnograms and the ``.hyp`` sidecar format."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LabelError

EPOCH_SECONDS = 30


class Stage(enum.IntEnum):
    """Output classes. The integer value is the network's output index."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    R = 4
    UNSCORED = -1


SCORED_STAGES = (Stage.W, Stage.N1, Stage.N2, Stage.N3, Stage.R)
N_CLASSES = len(SCORED_STAGES)

_AASM = {"W": Stage.W, "N1": Stage.N1, "N2": Stage.N2, "N3": Stage.N3, "R": Stage.R}
_RK = {
    "W": Stage.W,
    "S1": Stage.N1,
    "S2": Stage.N2,
    "S3": Stage.N3,
    "S4": Stage.N3,
    "R": Stage.R,
}
_NOT_SCORED = {"MT", "U"}


def normalize_label(raw: str, standard: str = "AASM", line: int | None = None) -> Stage:
    """Map one sidecar token to a :class:`Stage`.

    R&K tokens S3 and S4 both collapse to N3. Movement time (``MT``) and
    ``U`` become ``UNSCORED`` under either standard.
    """
    token = raw.strip().upper()
    if token in _NOT_SCORED:
        return Stage.UNSCORED
    table = _RK if standard.upper() == "RK" else _AASM
    try:
        return table[token]
    except KeyError:
        raise LabelError(raw.strip(), line) from None


@dataclass(frozen=True)
class Hypnogram:
    stages: np.ndarray
    epoch_duration: int = EPOCH_SECONDS

    def __post_init__(self):
        arr = np.asarray(self.stages, dtype=np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "stages", arr)

    def __len__(self) -> int:
        return len(self.stages)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Hypnogram):
            return NotImplemented
        return self.epoch_duration == other.epoch_duration and np.array_equal(
            self.stages, other.stages
        )

    def __hash__(self):
        return hash((self.stages.tobytes(), self.epoch_duration))

    @classmethod
    def from_labels(cls, labels) -> Hypnogram:
        return cls(np.array([int(Stage[s] if isinstance(s, str) else s) for s in labels]))

    def labels(self) -> list[str]:
        return [Stage(int(s)).name for s in self.stages]

    @property
    def scored_mask(self) -> np.ndarray:
        return self.stages != Stage.UNSCORED


def read_hypnogram(path: str | os.PathLike, standard: str = "AASM") -> Hypnogram:
    stages = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            stages.append(normalize_label(line, standard, lineno))
    return Hypnogram(np.array(stages, dtype=np.int8))


def write_hypnogram(hyp: Hypnogram, path: str | os.PathLike) -> None:
    # UNSCORED is written as U so the file re-reads under both standards
    names = ["U" if n == "UNSCORED" else n for n in hyp.labels()]
    Path(path).write_text("".join(n + "\n" for n in names), encoding="ascii")


def sidecar_path(edf_path: str | os.PathLike) -> Path:
    """``night1.edf`` -> ``night1.hyp``."""
    return Path(edf_path).with_suffix(".hyp")
