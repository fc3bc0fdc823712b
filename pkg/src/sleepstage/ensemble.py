"""Hard-label majority vote over independently trained staging models."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, SleepStageError
from .stages import N_CLASSES, Hypnogram
from .staging import StagingModel, score_recording


def majority_vote(labels: Sequence[int], posteriors: Sequence[np.ndarray]) -> int:
    """Most frequent label; ties go to the highest summed posterior, then to the lower stage.

    Parameters
    ----------
    labels
        One stage index per member.
    posteriors
        One 5-vector per member, in the same order.
    """
    if len(labels) == 0:
        raise ValueError("majority vote needs at least one member")
    if len(labels) != len(posteriors):
        raise ValueError(f"{len(labels)} labels but {len(posteriors)} posterior vectors")
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)
    tied = np.flatnonzero(counts == counts.max())
    if tied.size == 1:
        return int(tied[0])
    sums = np.sum(np.asarray(posteriors, dtype=np.float64), axis=0)
    # argmax returns the first maximum, i.e. the earliest stage among equal sums
    return int(tied[np.argmax(sums[tied])])


def vote_epochs(labels: np.ndarray, posteriors: np.ndarray) -> np.ndarray:
    """Vectorized :func:`majority_vote`.

    ``labels`` is (K, M) and ``posteriors`` is (K, M, 5); returns (M,) labels.
    """
    labels = np.asarray(labels, dtype=np.int64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    k, m = labels.shape
    if k == 0:
        raise ValueError("majority vote needs at least one member")
    counts = np.zeros((m, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.arange(m)[None, :].repeat(k, 0), labels), 1)
    sums = posteriors.sum(axis=0)
    tied = counts == counts.max(axis=1, keepdims=True)
    return np.argmax(np.where(tied, sums, -np.inf), axis=1)


@dataclass
class Member:
    model: StagingModel
    tag: str
    path: str | None = None


class Ensemble:
    """An ordered collection of models, each tagged with the dataset it was trained on."""

    def __init__(self, members: Sequence[Member]):
        if not members:
            raise ConfigError("an ensemble needs at least one member")
        self.members = list(members)

    @property
    def tags(self) -> list[str]:
        return [m.tag for m in self.members]

    def __len__(self) -> int:
        return len(self.members)

    def predict_posteriors(self, recording, filter_config=None):
        """Per-member labels (K, M) and posteriors (K, M, 5) for one recording."""
        labels, posts = [], []
        for i, mem in enumerate(self.members):
            try:
                hyp, post = score_recording(mem.model, recording, filter_config, return_posteriors=True)
            except SleepStageError as exc:
                exc.member, exc.tag = i, mem.tag
                exc.args = (f"ensemble member {i} ({mem.tag}): {exc}",)
                raise
            labels.append(hyp.stages.astype(np.int64))
            posts.append(post)
        return np.stack(labels), np.stack(posts)

    def save_manifest(self, path: str | os.PathLike) -> None:
        lines = []
        for m in self.members:
            if m.path is None:
                raise ConfigError(f"member {m.tag!r} has no checkpoint path")
            lines.append(f"{m.tag}\t{m.path}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_manifest(cls, path: str | os.PathLike) -> Ensemble:
        """Read ``tag<TAB>checkpoint`` lines; relative paths resolve against the manifest."""
        base = Path(path).parent
        members = []
        for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ConfigError(f"{path}:{n}: expected 'tag<TAB>checkpoint'")
            tag, ckpt = parts
            full = Path(ckpt) if Path(ckpt).is_absolute() else base / ckpt
            members.append(Member(StagingModel.load(full), tag, ckpt))
        return cls(members)


def ensemble_predict(ens: Ensemble, recording, filter_config=None) -> Hypnogram:
    """Majority-vote hypnogram of every member on one montaged recording."""
    labels, posts = ens.predict_posteriors(recording, filter_config)
    return Hypnogram(vote_epochs(labels, posts))
