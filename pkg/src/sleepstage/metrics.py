"""Confusion matrices, Cohen's kappa and the local/external/ensemble summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .errors import AggregationError, KappaUndefinedError
from .stages import N_CLASSES, Hypnogram, Stage

LOCAL = "local"
EXTERNAL = "external"
ENSEMBLE = "ensemble"
BIASED = "biased-diagonal"
ROLES = (LOCAL, EXTERNAL, ENSEMBLE, BIASED)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are the reference stage, columns the predicted stage."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion counts must be square, got shape {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls, n_classes: int = N_CLASSES) -> ConfusionMatrix:
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def _as_stages(h) -> np.ndarray:
    return np.asarray(h.stages if isinstance(h, Hypnogram) else h, dtype=np.int64)


def confusion(predicted, reference, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    """Count (reference, prediction) pairs, skipping epochs UNSCORED in either."""
    p = _as_stages(predicted)
    r = _as_stages(reference)
    if p.shape != r.shape:
        raise ValueError(f"hypnogram lengths differ: {p.size} predicted vs {r.size} reference")
    keep = (p != Stage.UNSCORED) & (r != Stage.UNSCORED)
    counts = np.bincount(r[keep] * n_classes + p[keep], minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def merge(matrices: Iterable[ConfusionMatrix], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    total = ConfusionMatrix.empty(n_classes)
    for m in matrices:
        total = total + m
    return total


def kappa(cm: ConfusionMatrix | np.ndarray) -> float:
    """Cohen's kappa, ``(p_o - p_e) / (1 - p_e)``.

    Raises
    ------
    KappaUndefinedError
        For an empty matrix, or when chance agreement is 1 but observed is not.
    """
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    n = float(c.sum())
    if n == 0:
        raise KappaUndefinedError("kappa is undefined for an empty confusion matrix")
    p_o = float(np.trace(c)) / n
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise KappaUndefinedError("chance agreement is 1 while observed agreement is not")
    return (p_o - p_e) / (1.0 - p_e)


def kappa_of(predicted, reference) -> float:
    return kappa(confusion(predicted, reference))


def round_half_away(x: float, digits: int) -> float:
    """Round half away from zero (``round`` would round half to even)."""
    q = Decimal(1).scaleb(-digits)
    d = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)
    return float(d)


def fmt(x: float | None, digits: int = 2) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{round_half_away(x, digits):.{digits}f}"


# ---------------------------------------------------------------- kappa tables


@dataclass
class KappaTable:
    """Kappa cells keyed by ``(config, predicted dataset, source)`` with a role tag.

    ``source`` is the dataset whose model produced the prediction; for
    ensemble cells it is the literal ``"ENS"``.
    """

    datasets: list[str]
    configs: list[str]
    cells: dict[tuple[str, str, str], tuple[float, str]] = field(default_factory=dict)

    def set(self, config: str, dataset: str, source: str, value: float, role: str) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.cells[(config, dataset, source)] = (float(value), role)

    def get(self, config: str, dataset: str, source: str) -> float | None:
        cell = self.cells.get((config, dataset, source))
        return None if cell is None else cell[0]

    def local(self, config: str, dataset: str) -> float | None:
        for (c, d, _), (v, role) in self.cells.items():
            if c == config and d == dataset and role == LOCAL:
                return v
        return None

    def ensemble(self, config: str, dataset: str) -> float | None:
        for (c, d, _), (v, role) in self.cells.items():
            if c == config and d == dataset and role == ENSEMBLE:
                return v
        return None

    def externals(self, config: str, dataset: str) -> list[float]:
        """Kappas of every other model on ``dataset``.

        Sources that are table datasets come first, in dataset order; any
        other external sources follow in insertion order.
        """
        found = {src: v for (c, d, src), (v, role) in self.cells.items()
                 if c == config and d == dataset and role == EXTERNAL}
        known = [found.pop(src) for src in self.datasets if src in found]
        return known + list(found.values())

    def external_stats(self, config: str, dataset: str) -> tuple[float, float, float] | None:
        ext = self.externals(config, dataset)
        if not ext:
            return None
        return min(ext), max(ext), float(np.mean(ext))


@dataclass(frozen=True)
class Summary:
    """Cross-dataset means for one configuration (unrounded)."""

    config: str
    local: float
    external: float
    ensemble: float

    @property
    def ext_minus_local(self) -> float:
        return self.external - self.local

    @property
    def ens_minus_local(self) -> float:
        return self.ensemble - self.local

    @property
    def ens_minus_ext(self) -> float:
        return self.ensemble - self.external


def aggregate(table: KappaTable, configs: Sequence[str] | None = None) -> list[Summary]:
    """Average local, mean-external and ensemble kappas across datasets per config.

    Raises
    ------
    AggregationError
        Listing every missing ``(config, dataset, column)`` cell.
    """
    configs = list(configs or table.configs)
    missing = []
    out = []
    for cfg in configs:
        loc, ext, ens = [], [], []
        for ds in table.datasets:
            v = table.local(cfg, ds)
            (loc.append(v) if v is not None else missing.append((cfg, ds, LOCAL)))
            stats = table.external_stats(cfg, ds)
            (ext.append(stats[2]) if stats is not None else missing.append((cfg, ds, EXTERNAL)))
            v = table.ensemble(cfg, ds)
            (ens.append(v) if v is not None else missing.append((cfg, ds, ENSEMBLE)))
        if not missing:
            out.append(Summary(cfg, float(np.mean(loc)), float(np.mean(ext)), float(np.mean(ens))))
    if missing:
        raise AggregationError(missing)
    return out


def table_from_columns(datasets: Sequence[str], config: str, local: Sequence[float],
                       external_avg: Sequence[float], ensemble: Sequence[float]) -> KappaTable:
    """Build a table from already-averaged per-dataset columns.

    Each external average becomes a single external cell, so
    :func:`aggregate` reproduces the cross-dataset means of published columns.
    """
    if not len(datasets) == len(local) == len(external_avg) == len(ensemble):
        raise ValueError("column lengths differ")
    t = KappaTable(list(datasets), [config])
    for ds, lo, ex, en in zip(datasets, local, external_avg, ensemble):
        t.set(config, ds, ds, lo, LOCAL)
        t.set(config, ds, "EXT", ex, EXTERNAL)
        t.set(config, ds, "ENS", en, ENSEMBLE)
    return t


# ---------------------------------------------------------------- rendering


def render_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned plain-text table; first column left-aligned, the rest right-aligned."""
    cols = [list(header)] + [list(r) for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]

    def line(r):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        return "  ".join(cells).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(cols[0]), sep] + [line(r) for r in cols[1:]]) + "\n"


def render_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


SUMMARY_HEADER = ("Model configuration", "I", "II", "III", "I vs II", "I vs III", "II vs III")


def summary_rows(summaries: Sequence[Summary]) -> list[list[str]]:
    return [
        [s.config, fmt(s.local, 4), fmt(s.external, 4), fmt(s.ensemble, 4),
         fmt(s.ext_minus_local, 4), fmt(s.ens_minus_local, 4), fmt(s.ens_minus_ext, 4)]
        for s in summaries
    ]
