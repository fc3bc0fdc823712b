"""Local, external and ensemble evaluation of staging models across databases.

Experiment 1 trains one model per (database, configuration) and reports its
kappa on the training, validation and test recordings. Experiment 2 scores
every model on every complete database. Experiment 3 predicts each database
with a majority vote of the models trained on the *other* databases.

All three share one cache of per-recording posteriors, so a model scores a
recording exactly once per run.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .edfio import read_edf, select_montage
from .ensemble import Ensemble, Member, vote_epochs
from .errors import ConfigError, OrchestrationError, SleepStageError
from .metrics import (
    BIASED,
    ENSEMBLE,
    EXTERNAL,
    LOCAL,
    SUMMARY_HEADER,
    KappaTable,
    Summary,
    aggregate,
    confusion,
    fmt,
    kappa,
    merge,
    render_csv,
    render_text,
    summary_rows,
)
from .stages import Stage, normalize_label
from .staging import ModelConfig, StagingModel, parse_config_name
from .synth import DatabaseSpec, SynthDbSpec, synth_database
from .training import MAX_EPOCHS, Dataset, PreparedRecording, TrainReport, recording_posteriors, train

log = logging.getLogger(__name__)

ENS = "ENS"


def normalize_labels(raw: str, standard: str = "AASM", line: int | None = None) -> Stage:
    """Sidecar token -> stage; R&K S3/S4 merge into N3, MT/U become UNSCORED."""
    return normalize_label(raw, standard, line)


# ---------------------------------------------------------------- data loading


def load_dataset(db: DatabaseSpec, filtering: bool = False, filter_config: dsp.FilterConfig | None = None) -> Dataset:
    """Read, montage and resample every recording of ``db`` into 100 Hz epochs.

    A hypnogram longer than the signal is truncated; epochs beyond a short
    hypnogram are treated as unscored.
    """
    fc = replace(filter_config or dsp.FilterConfig(mains_hz=db.mains_hz), enabled=filtering)
    recs = []
    for path in db.paths():
        try:
            rec = read_edf(path, with_sidecar=True, standard=db.standard)
        except OSError as exc:
            raise OrchestrationError(f"{db.id}: cannot read {path}: {exc}") from exc
        if rec.hypnogram is None:
            raise OrchestrationError(f"{db.id}: {path} has no label sidecar")
        pre = dsp.preprocess(select_montage(rec, db.montage), fc)
        m = pre.n_epochs
        stages = np.full(m, int(Stage.UNSCORED), dtype=np.int64)
        k = min(m, len(rec.hypnogram))
        stages[:k] = rec.hypnogram.stages[:k]
        recs.append(PreparedRecording(rec.name, pre.epochs, stages))
    return Dataset(db.id, recs)


class DatasetCache:
    """Prepared datasets keyed by (database id, filtering flag)."""

    def __init__(self, dbs: Sequence[DatabaseSpec], filter_config: dsp.FilterConfig | None = None):
        self.dbs = {db.id: db for db in dbs}
        self.filter_config = filter_config
        self._data: dict[tuple[str, bool], Dataset] = {}

    def get(self, db_id: str, filtering: bool) -> Dataset:
        key = (db_id, filtering)
        if key not in self._data:
            db = self.dbs[db_id]
            fc = replace(self.filter_config, mains_hz=db.mains_hz) if self.filter_config else None
            self._data[key] = load_dataset(db, filtering, fc)
        return self._data[key]


# ---------------------------------------------------------------- results


@dataclass
class RunState:
    """Everything the three experiments produce, keyed by (database id, config name)."""

    db_ids: list[str]
    configs: list[ModelConfig]
    seed: int
    models: dict[tuple[str, str], StagingModel] = field(default_factory=dict)
    reports: dict[tuple[str, str], TrainReport] = field(default_factory=dict)
    # (model db, config, predicted db) -> {recording: (M, 5) posteriors}
    posteriors: dict[tuple[str, str, str], dict[str, np.ndarray]] = field(default_factory=dict)
    grid: dict[tuple[str, str, str], float] = field(default_factory=dict)
    ensembles: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    ensemble_kappa: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def config_names(self) -> list[str]:
        return [c.name for c in self.configs]


def _train_job(args):
    config, dataset, seed, max_epochs = args
    try:
        model, report = train(config, dataset, seed, max_epochs=max_epochs)
    except SleepStageError as exc:
        exc.args = (f"{dataset.name}/{config.name}: {exc}",)
        raise
    return model, report


def experiment1(dbs: Sequence[DatabaseSpec], configs: Sequence[ModelConfig], seed: int = 0,
                cache: DatasetCache | None = None, workers: int = 1,
                out_dir: str | os.PathLike | None = None, max_epochs: int = MAX_EPOCHS) -> RunState:
    """Train M(k) for every database k and configuration; record TR/VAL/TS kappa."""
    cache = cache or DatasetCache(dbs)
    state = RunState([db.id for db in dbs], list(configs), seed)
    jobs = [(db.id, cfg) for db in dbs for cfg in configs]
    args = [(cfg, cache.get(db_id, cfg.filtering), seed, max_epochs) for db_id, cfg in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = [_train_job(a) for a in args]
    for (db_id, cfg), (model, report) in zip(jobs, results):
        state.models[(db_id, cfg.name)] = model
        state.reports[(db_id, cfg.name)] = report
        state.posteriors[(db_id, cfg.name, db_id)] = report.posteriors
        log.info("%s %s: %d iterations, TS kappa %.4f", db_id, cfg.name, report.iterations, report.kappa_ts)
    if out_dir is not None:
        _persist_models(state, Path(out_dir))
    return state


def _persist_models(state: RunState, out: Path) -> None:
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    for (db_id, cfg), model in sorted(state.models.items()):
        model.save(out / "models" / checkpoint_name(db_id, cfg))
        (out / "logs" / f"{db_id}__{cfg}.csv").write_text(state.reports[(db_id, cfg)].log_csv())


def checkpoint_name(db_id: str, config: str) -> str:
    return f"{db_id}__{config}.ckpt"


def _dataset_kappa(posts: dict[str, np.ndarray], data: Dataset) -> float:
    cms = [confusion(np.argmax(posts[r.name], axis=1), r.stages) for r in data.recordings]
    return kappa(merge(cms))


def experiment2(state: RunState, cache: DatasetCache) -> RunState:
    """Score every model on every complete database (the diagonal is biased)."""
    for cfg in state.configs:
        for src in state.db_ids:
            model = state.models.get((src, cfg.name))
            if model is None:
                raise OrchestrationError(f"no trained model for {src}/{cfg.name}")
            for dst in state.db_ids:
                key = (src, cfg.name, dst)
                data = cache.get(dst, cfg.filtering)
                if key not in state.posteriors:
                    state.posteriors[key] = recording_posteriors(model, data.recordings)
                state.grid[key] = _dataset_kappa(state.posteriors[key], data)
    return state


def experiment3(state: RunState, cache: DatasetCache, out_dir: str | os.PathLike | None = None) -> RunState:
    """Predict each database k by majority vote of every model except M(k)."""
    if len(state.db_ids) < 2:
        raise OrchestrationError("the ensemble experiment needs at least two databases")
    for cfg in state.configs:
        for dst in state.db_ids:
            members = [src for src in state.db_ids if src != dst]
            assert dst not in members
            state.ensembles[(dst, cfg.name)] = members
            data = cache.get(dst, cfg.filtering)
            cms = []
            for r in data.recordings:
                try:
                    posts = np.stack([state.posteriors[(src, cfg.name, dst)][r.name] for src in members])
                except KeyError as exc:
                    raise OrchestrationError(f"missing posteriors {exc}; run experiment 2 first") from None
                labels = np.argmax(posts, axis=2)
                cms.append(confusion(vote_epochs(labels, posts), r.stages))
            state.ensemble_kappa[(dst, cfg.name)] = kappa(merge(cms))
            if out_dir is not None:
                ens_dir = Path(out_dir) / "ensembles"
                ens_dir.mkdir(parents=True, exist_ok=True)
                lines = [f"{src}\t../models/{checkpoint_name(src, cfg.name)}" for src in members]
                (ens_dir / f"ENS_{dst}__{cfg.name}.txt").write_text("\n".join(lines) + "\n")
    return state


def ensemble_for(state: RunState, dst: str, config: str) -> Ensemble:
    """ENS(dst) as an :class:`Ensemble` of in-memory models."""
    return Ensemble([Member(state.models[(src, config)], src) for src in state.ensembles[(dst, config)]])


# ---------------------------------------------------------------- report


def kappa_table(state: RunState) -> KappaTable:
    t = KappaTable(list(state.db_ids), state.config_names)
    for cfg in state.config_names:
        for dst in state.db_ids:
            t.set(cfg, dst, "TS", state.reports[(dst, cfg)].kappa_ts, LOCAL)
            for src in state.db_ids:
                if (src, cfg, dst) in state.grid:
                    role = BIASED if src == dst else EXTERNAL
                    t.set(cfg, dst, src, state.grid[(src, cfg, dst)], role)
            if (dst, cfg) in state.ensemble_kappa:
                t.set(cfg, dst, ENS, state.ensemble_kappa[(dst, cfg)], ENSEMBLE)
    return t


@dataclass
class ExperimentReport:
    """Rendered result tables; ``tables`` maps a stem to (header, rows)."""

    tables: dict[str, tuple[list[str], list[list[str]]]]
    summaries: list[Summary]
    observations: list[str]

    def text(self) -> str:
        titles = {
            "table1": "Local training results",
            "table2": "Individual models on complete databases (* = biased diagonal)",
            "table3": "Local, external and ensemble performance",
            "table4": "Aggregated over databases",
        }
        parts = []
        for stem, (header, rows) in self.tables.items():
            parts.append(f"{titles[stem]}\n\n{render_text(header, rows)}")
        parts.append("Observations\n\n" + "".join(f"- {o}\n" for o in self.observations))
        return "\n".join(parts)

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir) / "reports"
        out.mkdir(parents=True, exist_ok=True)
        for stem, (header, rows) in self.tables.items():
            (out / f"{stem}.csv").write_text(render_csv(header, rows))
            (out / f"{stem}.txt").write_text(render_text(header, rows))
        (out / "report.txt").write_text(self.text())


def build_report(state: RunState) -> ExperimentReport:
    cfgs = state.config_names
    t1 = [
        [dst if i == 0 else "", cfg, str(rep.iterations), fmt(rep.kappa_tr), fmt(rep.kappa_val), fmt(rep.kappa_ts)]
        for dst in state.db_ids
        for i, cfg in enumerate(cfgs)
        for rep in [state.reports[(dst, cfg)]]
    ]
    h1 = ["Dataset", "Model configuration", "Training iterations", "TR", "VAL", "TS"]

    h2 = ["Predicted dataset", "Model configuration"] + [f"M({s})" for s in state.db_ids]
    t2 = []
    for dst in state.db_ids:
        for i, cfg in enumerate(cfgs):
            row = [dst if i == 0 else "", cfg]
            for src in state.db_ids:
                v = state.grid.get((src, cfg, dst))
                row.append(fmt(v) + ("*" if src == dst and v is not None else ""))
            t2.append(row)

    table = kappa_table(state)
    h3 = ["Predicted dataset", "Model configuration", "Local", "External range", "External average", "Ensemble"]
    t3 = []
    obs = []
    for dst in state.db_ids:
        for i, cfg in enumerate(cfgs):
            stats = table.external_stats(cfg, dst)
            loc = table.local(cfg, dst)
            ens = table.ensemble(cfg, dst)
            rng = "-" if stats is None else f"{fmt(stats[0])} - {fmt(stats[1])}"
            t3.append([dst if i == 0 else "", cfg, fmt(loc), rng, fmt(None if stats is None else stats[2]), fmt(ens)])
            if stats is not None and ens is not None:
                obs.append(
                    f"{dst} {cfg}: local {'>' if loc > stats[2] else '<='} external average; "
                    f"ensemble {'>=' if ens >= stats[2] else '<'} external average"
                )
    summaries = aggregate(table) if state.ensemble_kappa else []
    tables = {"table1": (h1, t1), "table2": (h2, t2), "table3": (h3, t3)}
    if summaries:
        tables["table4"] = (list(SUMMARY_HEADER), summary_rows(summaries))
    return ExperimentReport(tables, summaries, obs)


# ---------------------------------------------------------------- manifest


@dataclass
class Manifest:
    """Experiment description: databases (on disk or synthetic), configs, seed, output."""

    databases: list[DatabaseSpec]
    configs: list[ModelConfig]
    seed: int = 0
    output: str = "runs"
    workers: int = 1
    synth: list[SynthDbSpec] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d, path.parent)

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> Manifest:
        unknown = set(d) - {"databases", "configs", "seed", "output", "workers", "synth"}
        if unknown:
            raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
        dbs = []
        for entry in d.get("databases", []):
            if isinstance(entry, str):
                p = Path(entry)
                dbs.append(DatabaseSpec.load(p if p.is_absolute() else base / p))
            else:
                dbs.append(DatabaseSpec.from_dict(entry, base))
        synth = [SynthDbSpec.from_dict(s) for s in d.get("synth", [])]
        configs = [parse_config_name(c) for c in d.get("configs", ["CNN_1"])]
        return cls(dbs, configs, int(d.get("seed", 0)), str(d.get("output", "runs")),
                   int(d.get("workers", 1)), synth)

    def to_dict(self) -> dict:
        return {
            "databases": [db.to_dict() for db in self.databases],
            "synth": [s.to_dict() for s in self.synth],
            "configs": [c.name for c in self.configs],
            "seed": self.seed,
            "output": self.output,
            "workers": self.workers,
        }


def desk_scale_specs(seed: int = 0) -> list[SynthDbSpec]:
    """Three synthetic databases differing in gain, mains frequency and sampling rate."""
    return [
        SynthDbSpec("SYN_A", fs=128.0, gain=1.0, mains_hz=50.0, seed=seed),
        SynthDbSpec("SYN_B", fs=200.0, gain={"eeg": 2.5, "emg": 0.5, "eog": 1.5, "ecg": 1.0},
                    mains_hz=60.0, seed=seed),
        SynthDbSpec("SYN_C", fs=256.0, gain={"eeg": 0.4, "emg": 3.0, "eog": 0.8, "ecg": 2.0},
                    mains_hz=50.0, standard="RK", movement_fraction=0.02, seed=seed),
    ]


def run_all(dbs: Sequence[DatabaseSpec], configs: Sequence[ModelConfig], seed: int = 0,
            out_dir: str | os.PathLike | None = None, workers: int = 1,
            max_epochs: int = MAX_EPOCHS) -> tuple[RunState, ExperimentReport]:
    """Experiments 1, 2 and 3 in sequence; writes models, logs and reports when ``out_dir`` is set."""
    cache = DatasetCache(dbs)
    state = experiment1(dbs, configs, seed, cache, workers, out_dir, max_epochs)
    experiment2(state, cache)
    experiment3(state, cache, out_dir)
    report = build_report(state)
    if out_dir is not None:
        report.write(out_dir)
    return state, report


def materialize(manifest: Manifest, out_dir: str | os.PathLike) -> list[DatabaseSpec]:
    """Databases named by the manifest, synthesizing the synthetic ones under ``out_dir/data``."""
    dbs = list(manifest.databases)
    for spec in manifest.synth:
        dbs.append(synth_database(spec, Path(out_dir) / "data" / spec.id))
    if not dbs:
        raise ConfigError("the manifest names no databases")
    return dbs


__all__ = [
    "DatabaseSpec",
    "DatasetCache",
    "ExperimentReport",
    "Manifest",
    "RunState",
    "SynthDbSpec",
    "build_report",
    "desk_scale_specs",
    "ensemble_for",
    "experiment1",
    "experiment2",
    "experiment3",
    "kappa_table",
    "load_dataset",
    "materialize",
    "normalize_labels",
    "run_all",
    "synth_database",
]
