"""Command line front end: ``sleepstage <command> [options]``.

Every command prints its fully resolved configuration as JSON before doing
any work. Exit status is 0 on success, 2 for parse/configuration errors,
3 for data errors, 4 for training errors and 5 for orchestration errors.
``SLEEPSTAGE_OUTPUT`` overrides the output directory of any command.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp
from .edfio import read_edf, select_montage
from .errors import ConfigError, DataError, SleepStageError
from .experiments import Manifest, load_dataset, materialize, run_all
from .metrics import fmt
from .stages import write_hypnogram
from .staging import ALL_CONFIG_NAMES, StagingModel, parse_config_name, score_recording
from .synth import DatabaseSpec, SynthDbSpec, synth_database
from .training import train

OUTPUT_ENV = "SLEEPSTAGE_OUTPUT"
log = logging.getLogger("sleepstage")


def _output(args) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or args.out)


def _filter_config(args, mains_default: float = 50.0) -> dsp.FilterConfig:
    return dsp.FilterConfig(
        enabled=False,
        mains_hz=args.mains if args.mains is not None else mains_default,
        emg_highpass_hz=args.emg_highpass,
        ecg_cancellation=not args.no_ecg_cancel,
    )


def _print_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, indent=2, sort_keys=True, default=str))
    sys.stdout.flush()


def _config_dict(cfg) -> dict:
    return {"name": cfg.name, **cfg.to_dict()}


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    gain = json.loads(args.gain) if args.gain.strip().startswith("{") else float(args.gain)
    spec = SynthDbSpec(args.id, args.recordings, args.epochs, args.fs, gain, args.mains or 50.0,
                       noise=args.noise, standard=args.standard, seed=args.seed,
                       movement_fraction=args.movement)
    out = _output(args)
    _print_config("synth", {"spec": spec.to_dict(), "output": str(out)})
    db = synth_database(spec, out)
    print(f"wrote {len(db.recordings)} recordings to {out}")
    return 0


def cmd_preprocess(args) -> int:
    db = DatabaseSpec.load(args.db)
    fc = dataclasses.replace(_filter_config(args, db.mains_hz), enabled=args.filter)
    out = _output(args)
    _print_config("preprocess", {"database": db.to_dict(), "filter": dataclasses.asdict(fc), "output": str(out)})
    data = load_dataset(db, args.filter, fc)
    out.mkdir(parents=True, exist_ok=True)
    for r in data.recordings:
        np.savez(out / f"{r.name}.npz", epochs=r.raw, stages=r.stages)
    print(f"wrote {len(data.recordings)} preprocessed recordings to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config_name(args.config)
    db = DatabaseSpec.load(args.db)
    out = _output(args)
    _print_config("train", {"database": db.to_dict(), "model": _config_dict(cfg), "seed": args.seed,
                            "max_epochs": args.max_epochs, "output": str(out)})
    data = load_dataset(db, cfg.filtering)
    model, report = train(cfg, data, args.seed, max_epochs=args.max_epochs)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"{db.id}__{cfg.name}.ckpt")
    (out / f"{db.id}__{cfg.name}.csv").write_text(report.log_csv())
    print(f"iterations {report.iterations}  TR {fmt(report.kappa_tr)}  VAL {fmt(report.kappa_val)}  "
          f"TS {fmt(report.kappa_ts)}")
    return 0


def cmd_score(args) -> int:
    model = StagingModel.load(args.model)
    db = DatabaseSpec.load(args.db)
    fc = _filter_config(args, db.mains_hz)
    _print_config("score", {"model": _config_dict(model.config), "edf": args.edf,
                            "montage": db.montage.to_dict(), "filter": dataclasses.asdict(fc)})
    rec = select_montage(read_edf(args.edf), db.montage)
    hyp = score_recording(model, rec, fc)
    out = Path(os.environ.get(OUTPUT_ENV) or args.out or Path(args.edf).with_suffix(".scored.hyp"))
    if out.suffix != ".hyp":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(args.edf).stem + ".hyp")
    write_hypnogram(hyp, out)
    print(f"wrote {len(hyp)} epochs to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .training import pooled_kappa, recording_posteriors

    model = StagingModel.load(args.model)
    db = DatabaseSpec.load(args.db)
    _print_config("evaluate", {"model": _config_dict(model.config), "database": db.to_dict()})
    data = load_dataset(db, model.config.filtering)
    posts = recording_posteriors(model, data.recordings)
    print(f"{db.id}  {model.config.name}  kappa {fmt(pooled_kappa(posts, data.recordings), 4)}")
    return 0


def cmd_experiment(args) -> int:
    if args.manifest:
        manifest = Manifest.load(args.manifest)
    else:
        dbs = [DatabaseSpec.load(p) for p in args.db]
        manifest = Manifest(dbs, [parse_config_name(c) for c in args.config], args.seed, args.out,
                            args.workers)
        if args.desk_scale:
            from .experiments import desk_scale_specs

            manifest.synth = desk_scale_specs(args.seed)
    out = Path(os.environ.get(OUTPUT_ENV) or manifest.output)
    _print_config("experiment", {**manifest.to_dict(), "output": str(out), "max_epochs": args.max_epochs,
                                 "models": [_config_dict(c) for c in manifest.configs]})
    start = time.perf_counter()
    dbs = materialize(manifest, out)
    _, report = run_all(dbs, manifest.configs, manifest.seed, out, manifest.workers, args.max_epochs)
    print(report.text())
    print(f"finished in {time.perf_counter() - start:.0f} s; reports in {out / 'reports'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .neural.gradcheck import check_network
    from .staging import build_model

    overrides = {"kernel_width": 10, "epoch_samples": 300} if args.reduced else {}
    cfg = parse_config_name(args.config, **overrides)
    _print_config("gradcheck", {"model": _config_dict(cfg), "eps": args.eps, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    model = build_model(cfg, args.seed)
    if cfg.kind == "CNN_LSTM":
        x = rng.standard_normal((args.batch, cfg.L, cfg.n_rows, cfg.epoch_samples))
    else:
        x = rng.standard_normal((args.batch, cfg.n_rows, cfg.input_width))
    y = rng.integers(0, cfg.n_classes, args.batch)
    res = check_network(model, x, y, eps=args.eps, seed=args.seed)
    print(f"max relative error {res.max_rel_error:.3e} at {res.where} "
          f"({res.checked} checked, {res.skipped} skipped)")
    return 0 if res.max_rel_error <= args.tolerance else 4


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sleepstage", description="Automatic sleep staging pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def filt(sp):
        sp.add_argument("--mains", type=float, default=None, help="mains frequency in Hz")
        sp.add_argument("--emg-highpass", type=float, default=15.0)
        sp.add_argument("--no-ecg-cancel", action="store_true")

    sp = sub.add_parser("synth", help="write a synthetic database")
    sp.add_argument("--id", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--recordings", type=int, default=12)
    sp.add_argument("--epochs", type=int, default=120)
    sp.add_argument("--fs", type=float, default=200.0)
    sp.add_argument("--gain", default="1.0", help="a number or a JSON object per electrode group")
    sp.add_argument("--mains", type=float, default=50.0)
    sp.add_argument("--noise", type=float, default=5.0)
    sp.add_argument("--movement", type=float, default=0.0)
    sp.add_argument("--standard", choices=("AASM", "RK"), default="AASM")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="resample and epoch a database")
    sp.add_argument("--db", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--filter", action="store_true")
    filt(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train one model on one database")
    sp.add_argument("--db", required=True)
    sp.add_argument("--config", default="CNN_1", help=f"one of {', '.join(ALL_CONFIG_NAMES)}")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-epochs", type=int, default=30)
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="write the hypnogram of one EDF recording")
    sp.add_argument("--model", required=True)
    sp.add_argument("--edf", required=True)
    sp.add_argument("--db", required=True, help="database description holding the montage")
    sp.add_argument("--out", default=None)
    filt(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="pooled kappa of a model on a whole database")
    sp.add_argument("--model", required=True)
    sp.add_argument("--db", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="run the local, external and ensemble experiments")
    sp.add_argument("--manifest", help="JSON manifest; overrides the flags below")
    sp.add_argument("--db", action="append", default=[])
    sp.add_argument("--desk-scale", action="store_true", help="add the three built-in synthetic databases")
    sp.add_argument("--config", action="append", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--max-epochs", type=int, default=30, help="training passes per model")
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a network's gradients")
    sp.add_argument("--config", default="CNN_1")
    sp.add_argument("--reduced", action="store_true", help="4x300 inputs and 10-tap kernels")
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "experiment" and not args.manifest:
        args.config = args.config or ["CNN_1"]
        if not args.db and not args.desk_scale:
            print("error: give --manifest, --db or --desk-scale", file=sys.stderr)
            return ConfigError.exit_code
    try:
        return args.func(args)
    except SleepStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
