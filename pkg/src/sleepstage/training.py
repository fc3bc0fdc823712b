"""Recording-level splits, the learning-rate ladder, early stopping and the SGD loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dsp
from .errors import SplitError, TrainingError
from .metrics import confusion, kappa, merge
from .neural import functional as F
from .stages import Stage
from .staging import ModelConfig, StagingModel, assemble_inputs, build_model, epoch_posteriors

log = logging.getLogger(__name__)

BATCH_SIZE = 100
MAX_EPOCHS = 30
EVALS_PER_EPOCH = 5
PATIENCE = 10
IMPROVEMENT_TOL = 1e-9
MIN_RECORDINGS = 5
_LR_LADDER = (1e-3, 1e-4, 1e-5, 1e-6)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    tr: tuple[str, ...]
    val: tuple[str, ...]
    ts: tuple[str, ...]
    seed: int

    def role_of(self, name: str) -> str:
        for role in ("tr", "val", "ts"):
            if name in getattr(self, role):
                return role
        raise KeyError(name)


def split_dataset(recording_ids: Sequence[str], seed: int) -> SplitPlan:
    """Shuffle recordings and hold out 20% for testing, then 20% of the rest for validation.

    Counts are floored with a minimum of one recording each. The result does
    not depend on the order of ``recording_ids``.
    """
    ids = sorted(set(recording_ids))
    if len(ids) != len(recording_ids):
        raise SplitError("recording ids must be unique")
    n = len(ids)
    if n < MIN_RECORDINGS:
        raise SplitError(f"need at least {MIN_RECORDINGS} recordings to split, got {n}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    n_ts = max(1, n // 5)
    n_val = max(1, (n - n_ts) // 5)
    ts = tuple(sorted(order[:n_ts]))
    val = tuple(sorted(order[n_ts : n_ts + n_val]))
    tr = tuple(sorted(order[n_ts + n_val :]))
    return SplitPlan(tr, val, ts, seed)


# ---------------------------------------------------------------- schedule


def lr_at_epoch(epoch: int) -> float:
    """1e-3 for epochs 1-10, then a tenfold drop every 10 epochs down to 1e-6."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return _LR_LADDER[min((epoch - 1) // 10, len(_LR_LADDER) - 1)]


class EarlyStopper:
    """Stop after ``patience`` consecutive evaluations without strict improvement."""

    def __init__(self, patience: int = PATIENCE, tol: float = IMPROVEMENT_TOL):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.since = 0
        self.evaluations = 0

    def update(self, loss: float) -> bool:
        """Record one validation loss; returns True when training should stop."""
        self.evaluations += 1
        if loss < self.best - self.tol:
            self.best = loss
            self.since = 0
            return False
        self.since += 1
        return self.since >= self.patience

    @property
    def improved(self) -> bool:
        return self.since == 0 and self.evaluations > 0


def eval_points(n_batches: int, per_epoch: int = EVALS_PER_EPOCH) -> list[int]:
    """1-based batch counts after which validation runs, evenly spaced over a pass."""
    pts = {max(1, round(n_batches * (j + 1) / per_epoch)) for j in range(per_epoch)}
    return sorted(pts)


# ---------------------------------------------------------------- data


@dataclass
class PreparedRecording:
    """One recording at 100 Hz: raw epochs, standardized epochs and reference stages."""

    name: str
    raw: np.ndarray
    stages: np.ndarray
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.raw.ndim != 3 or self.raw.shape[0] != len(self.stages):
            raise TrainingError(
                f"{self.name}: {self.raw.shape[0]} epochs but {len(self.stages)} stages"
            )
        if self.std is None:
            self.std = dsp.standardize(self.raw)

    @property
    def scored(self) -> np.ndarray:
        return np.flatnonzero(self.stages != Stage.UNSCORED)


@dataclass
class Dataset:
    name: str
    recordings: list[PreparedRecording]
    plan: SplitPlan | None = None

    def __post_init__(self):
        names = [r.name for r in self.recordings]
        if len(set(names)) != len(names):
            raise TrainingError(f"{self.name}: duplicate recording names")

    def by_name(self, name: str) -> PreparedRecording:
        for r in self.recordings:
            if r.name == name:
                return r
        raise KeyError(name)

    def subset(self, names: Sequence[str]) -> list[PreparedRecording]:
        return [self.by_name(n) for n in names]

    def ensure_plan(self, seed: int) -> SplitPlan:
        if self.plan is None:
            self.plan = split_dataset([r.name for r in self.recordings], seed)
        return self.plan


def _index(recs: Sequence[PreparedRecording]) -> np.ndarray:
    """(n, 2) array of (recording, epoch) pairs for every scored epoch."""
    parts = [np.stack([np.full(len(r.scored), i), r.scored], axis=1) for i, r in enumerate(recs)]
    return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)


def make_batch(config: ModelConfig, recs: Sequence[PreparedRecording], items: np.ndarray):
    """Network inputs and labels for ``(recording, epoch)`` pairs, in the given order."""
    x = None
    for ri in np.unique(items[:, 0]):
        pos = np.flatnonzero(items[:, 0] == ri)
        r = recs[ri]
        part = assemble_inputs(config, r.raw, r.std, items[pos, 1])
        if x is None:
            x = np.empty((len(items),) + part.shape[1:])
        x[pos] = part
    y = np.array([recs[ri].stages[e] for ri, e in items], dtype=np.int64)
    return x, y


def _batches(n: int, size: int) -> list[slice]:
    """Consecutive slices of ``size``; a trailing single item joins the previous batch
    (batch normalization needs two samples)."""
    edges = list(range(0, n, size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] == 1:
        edges.pop(-2)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


# ---------------------------------------------------------------- evaluation


def recording_posteriors(model: StagingModel, recs: Sequence[PreparedRecording]) -> dict[str, np.ndarray]:
    model.eval()
    return {r.name: epoch_posteriors(model, r.raw, r.std) for r in recs}


def validation_loss(model: StagingModel, recs: Sequence[PreparedRecording]) -> float:
    """Mean cross-entropy over the scored epochs of ``recs`` in inference mode."""
    total, count = 0.0, 0
    for name, post in recording_posteriors(model, recs).items():
        r = next(x for x in recs if x.name == name)
        idx = r.scored
        total += -np.sum(np.log(np.maximum(post[idx, r.stages[idx]], F.PROB_FLOOR)))
        count += len(idx)
    return total / count


def pooled_kappa(posteriors: dict[str, np.ndarray], recs: Sequence[PreparedRecording]) -> float:
    cms = [confusion(np.argmax(posteriors[r.name], axis=1), r.stages) for r in recs]
    return kappa(merge(cms))


# ---------------------------------------------------------------- training


@dataclass
class EvalRecord:
    evaluation: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainReport:
    """Outcome of one training run.

    ``iterations`` counts passes over the training split that were started.
    ``posteriors`` holds the returned model's per-recording posteriors on the
    whole dataset and is not part of the printed report.
    """

    config: str
    dataset: str
    seed: int
    iterations: int
    curve: list[EvalRecord]
    best_val_loss: float
    kappa_tr: float | None = None
    kappa_val: float | None = None
    kappa_ts: float | None = None
    posteriors: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["evaluation", "epoch", "lr", "train_loss", "val_loss"])
        for e in self.curve:
            w.writerow([e.evaluation, e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_loss)])
        return buf.getvalue()


def _snapshot(model: StagingModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state().items()}


def train(
    config: ModelConfig,
    dataset: Dataset,
    seed: int = 0,
    max_epochs: int = MAX_EPOCHS,
    batch_size: int = BATCH_SIZE,
    evals_per_epoch: int = EVALS_PER_EPOCH,
    patience: int = PATIENCE,
    evaluate: bool = True,
    progress: Callable[[EvalRecord], None] | None = None,
) -> tuple[StagingModel, TrainReport]:
    """Train one model with SGD and validation-based early stopping.

    The returned model holds the parameters with the lowest validation loss.
    Initialization uses ``seed``; shuffling and dropout draw from separate
    streams derived from it, so runs are bit-reproducible.
    """
    plan = dataset.ensure_plan(seed)
    tr, val, ts = (dataset.subset(getattr(plan, s)) for s in ("tr", "val", "ts"))
    for role, recs in (("training", tr), ("validation", val), ("test", ts)):
        if sum(len(r.scored) for r in recs) == 0:
            raise TrainingError(f"{dataset.name}: the {role} split has no scored epochs")

    model = build_model(config, seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    items = _index(tr)
    slices = _batches(len(items), batch_size)
    points = set(eval_points(len(slices), evals_per_epoch))
    stopper = EarlyStopper(patience)
    best_state = _snapshot(model)
    curve: list[EvalRecord] = []
    epochs_run = 0
    stop = False

    for epoch in range(1, max_epochs + 1):
        epochs_run = epoch
        lr = lr_at_epoch(epoch)
        order = items[shuffle_rng.permutation(len(items))]
        run_loss, run_n = 0.0, 0
        for b, sl in enumerate(slices, start=1):
            x, y = make_batch(config, tr, order[sl])
            model.train()
            loss = model.loss_and_backward(x, y, dropout_rng)
            F.sgd_step(model.parameters(), model.gradients(), lr)
            run_loss += loss * len(y)
            run_n += len(y)
            if b not in points:
                continue
            vloss = validation_loss(model, val)
            rec = EvalRecord(len(curve) + 1, epoch, lr, run_loss / run_n, vloss)
            curve.append(rec)
            run_loss, run_n = 0.0, 0
            stop = stopper.update(vloss)
            if stopper.improved:
                best_state = _snapshot(model)
            if progress is not None:
                progress(rec)
            log.debug("%s/%s eval %d epoch %d val %.6f", dataset.name, config.name,
                      rec.evaluation, epoch, vloss)
            if stop:
                break
        if stop:
            break

    model.load_state(best_state)
    model.eval()
    report = TrainReport(config.name, dataset.name, seed, epochs_run, curve,
                         stopper.best if curve else math.nan)
    if evaluate:
        report.posteriors = recording_posteriors(model, dataset.recordings)
        report.kappa_tr = pooled_kappa(report.posteriors, tr)
        report.kappa_val = pooled_kappa(report.posteriors, val)
        report.kappa_ts = pooled_kappa(report.posteriors, ts)
    return model, report
