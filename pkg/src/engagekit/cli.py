"""Command-line entry point.

Subcommands mirror the pipeline stages:

    synth      write a synthetic corpus
    ingest     validate a corpus and print a summary
    window     preprocess a corpus into a windows file
    train      train one configuration on one fold, save a checkpoint
    evaluate   run a full cross-validation sweep
    report     re-render reports from a folds CSV

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure. All
randomness flows from --seed; reruns refuse to overwrite outputs unless
--force is given.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

from . import corpus, evalharness, preprocess, synth
from .corpus import DataError
from .evalharness import (ExperimentConfig, WindowDataset, aggregate,
                          config_label, make_folds, read_fold_records,
                          render_report, train_fold, write_fold_records,
                          write_report)
from .models import MODALITIES, ModelConfig
from .nn import NumericError, save_checkpoint
from .preprocess import WindowSpec
from .timecond import Strategy


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _check_output_dir(out_dir: Path, markers, force: bool):
    existing = [m for m in markers if (out_dir / m).exists()]
    if existing and not force:
        raise UsageError(f"output already exists in {out_dir} ({existing[0]}); "
                         "pass --force to overwrite")


def _write_run_manifest(out_dir: Path, command: str, resolved: dict, inputs: dict):
    payload = {"command": command, "inputs": inputs, "resolved_config": resolved,
               "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _find_manifests(corpus_dir: Path):
    manifests = sorted(corpus_dir.glob("*/session.manifest"))
    if not manifests:
        raise DataError(f"no session manifests under {corpus_dir}")
    return manifests


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        config = synth.SynthConfig(
            n_participants=args.participants, duration_s=args.duration,
            combat_segment_s=args.segment, effect_strength=args.effect,
            time_drift=args.drift, noise_sd=args.noise,
            modality_dropout=args.modality_dropout, trace_noise=args.trace_noise,
            seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out_dir = Path(args.out)
    _check_output_dir(out_dir, [synth.CONFIG_ECHO], args.force)
    manifests = synth.write_corpus(config, out_dir)
    print(f"wrote {len(manifests)} sessions of {config.duration_s:.0f} s to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    corpus_dir = Path(args.corpus)
    manifests = _find_manifests(corpus_dir)
    print(f"{'participant':<14}{'duration_s':>12}{'events':>9}{'frames':>9}"
          f"{'trace_pts':>11}  warnings")
    n_warnings = 0
    for manifest in manifests:
        session = corpus.read_session(manifest)
        n_warnings += len(session.warnings)
        notes = "; ".join(session.warnings) if session.warnings else "-"
        print(f"{session.participant_id:<14}{session.duration_s:>12.1f}"
              f"{len(session.events):>9}{session.features.n_frames:>9}"
              f"{session.trace.t.size:>11}  {notes}")
    print(f"ok: {len(manifests)} sessions, {n_warnings} warnings")
    return 0


# ---------------------------------------------------------------------------
# window
# ---------------------------------------------------------------------------

def _window_spec(args) -> WindowSpec:
    try:
        return WindowSpec(window_s=args.window_s, stride_s=args.stride_s,
                          stimulus_shift_s=args.shift_s, trace_hz=args.trace_hz,
                          epsilon=args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_window(args) -> int:
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out)
    spec = _window_spec(args)
    _check_output_dir(out_dir, [preprocess.WINDOWS_CSV], args.force)
    results = []
    flat_sessions = []
    total_segmented = 0
    for manifest in _find_manifests(corpus_dir):
        session = corpus.read_session(manifest)
        try:
            res = preprocess.build_windows(session, spec)
        except preprocess.FlatTraceError as exc:
            flat_sessions.append(f"{session.participant_id}: {exc}")
            continue
        res.features_path = str(manifest.parent.relative_to(corpus_dir) /
                                corpus.read_keyvalue_file(manifest)["features"])
        results.append(res)
        total_segmented += len(res.windows) + res.n_ambiguous
    if not results:
        raise DataError("no usable sessions (all traces flat or corpus empty)")
    out_dir.mkdir(parents=True, exist_ok=True)
    preprocess.write_windows_file(results, spec, corpus.DEFAULT_VOCABULARY, out_dir)
    _write_run_manifest(out_dir, "window",
                        {"spec": asdict(spec)}, {"corpus": str(corpus_dir)})

    print(f"{'participant':<14}{'mu':>8}{'high':>7}{'low':>7}{'ambiguous':>11}")
    totals = {"high": 0, "low": 0, "amb": 0}
    for res in results:
        n_high = sum(1 for w in res.windows if w.label is preprocess.Label.HIGH)
        n_low = len(res.windows) - n_high
        totals["high"] += n_high
        totals["low"] += n_low
        totals["amb"] += res.n_ambiguous
        print(f"{res.participant_id:<14}{res.mu:>8.3f}{n_high:>7}{n_low:>7}"
              f"{res.n_ambiguous:>11}")
        for note in res.warnings:
            print(f"    warning: {note}")
    kept = totals["high"] + totals["low"]
    print(f"total: {kept} windows kept ({totals['high']} high / {totals['low']} low), "
          f"{totals['amb']} ambiguous dropped")
    for note in flat_sessions:
        print(f"skipped flat-trace session - {note}")
    if total_segmented and kept < 0.1 * total_segmented:
        print(f"warning: near-empty dataset, epsilon {spec.epsilon} drops "
              f"{total_segmented - kept} of {total_segmented} windows")
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / report
# ---------------------------------------------------------------------------

def _load_dataset(args) -> WindowDataset:
    return WindowDataset.from_windows_dir(Path(args.windows), Path(args.corpus))


def _experiment_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        raw = corpus.read_keyvalue_file(args.config)
        parsers = {"modalities": lambda v: tuple(s.strip() for s in v.split(",")),
                   "conditionings": lambda v: tuple(s.strip() for s in v.split(",")),
                   "seed": int, "repeats": int, "epochs": int, "patience": int,
                   "lr": float, "batch": int, "participants": int, "jobs": int,
                   "embed_dim": int, "embed_base": float}
        for key, value in raw.items():
            if key not in parsers:
                raise UsageError(f"unknown experiment config key {key!r}")
            values[key] = parsers[key](value)
    for key in ("seed", "repeats", "epochs", "patience", "lr", "batch",
                "participants", "jobs", "embed_dim", "embed_base"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "modalities", None):
        values["modalities"] = tuple(args.modalities.split(","))
    if getattr(args, "conditionings", None):
        values["conditionings"] = tuple(args.conditionings.split(","))
    config = ExperimentConfig(**values)
    for modality in config.modalities:
        if modality not in MODALITIES:
            raise UsageError(f"unknown modality {modality!r}")
    for conditioning in config.conditionings:
        try:
            Strategy.parse(conditioning)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return config


def cmd_train(args) -> int:
    exp = _experiment_config(args)
    dataset = _load_dataset(args)
    out_dir = Path(args.out)
    _check_output_dir(out_dir, ["fold.csv", "model.ckpt"], args.force)
    plans = make_folds(dataset.participants, n_repeats=exp.repeats, seed=exp.seed,
                       expected_participants=exp.participants)
    wanted = [p for p in plans
              if p.repeat_index == args.repeat and p.fold_index == args.fold]
    if not wanted:
        raise UsageError(f"no fold with repeat {args.repeat} and index {args.fold}")
    config = ModelConfig(modality=args.modality, conditioning=args.conditioning,
                         seed=exp.seed, embed_dim=exp.embed_dim,
                         embed_base=exp.embed_base)
    result, net = train_fold(wanted[0], config, dataset, exp.settings())
    out_dir.mkdir(parents=True, exist_ok=True)
    label = config_label(config.modality, config.conditioning)
    write_fold_records(OrderedDict([(label, [result])]), out_dir / "fold.csv")
    save_checkpoint(net.config, net.parameters(), out_dir / "model.ckpt")
    _write_run_manifest(out_dir, "train", {"experiment": asdict(exp),
                                           "model": config.to_dict(),
                                           "repeat": args.repeat, "fold": args.fold},
                        {"windows": str(args.windows), "corpus": str(args.corpus)})
    print(f"{label} repeat {result.repeat_index} fold {result.fold_index}: "
          f"test accuracy {result.test_accuracy:.4f} "
          f"(baseline {result.baseline_accuracy:.4f}, "
          f"best epoch {result.best_epoch}/{result.epochs_run})")
    return 0


def cmd_evaluate(args) -> int:
    exp = _experiment_config(args)
    dataset = _load_dataset(args)
    out_dir = Path(args.out)
    _check_output_dir(out_dir, ["folds.csv"], args.force)

    def progress(done, total, label, result):
        if not args.quiet:
            print(f"[{done}/{total}] {label} r{result.repeat_index} "
                  f"f{result.fold_index} acc={result.test_accuracy:.4f} "
                  f"base={result.baseline_accuracy:.4f} epochs={result.epochs_run}",
                  flush=True)

    results, _ = evalharness.run_experiment(dataset, exp, progress=progress)
    report = aggregate(results)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_fold_records(results, out_dir / "folds.csv")
    write_report(report, out_dir)
    _write_run_manifest(out_dir, "evaluate", {"experiment": asdict(exp)},
                        {"windows": str(args.windows), "corpus": str(args.corpus)})
    print(render_report(report))
    return 0


def cmd_report(args) -> int:
    results = read_fold_records(Path(args.records))
    report = aggregate(results)
    if args.out:
        write_report(report, Path(args.out))
    print(render_report(report))
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="engagekit",
                     description="Long-term engagement modelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--participants", type=int, default=20)
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--segment", type=float, default=45.0)
    p.add_argument("--effect", type=float, default=1.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--modality-dropout", type=float, default=0.0,
                   dest="modality_dropout")
    p.add_argument("--trace-noise", type=float, default=0.08, dest="trace_noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a corpus")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("window", help="preprocess a corpus into windows")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-s", type=float, default=10.0, dest="window_s")
    p.add_argument("--stride-s", type=float, default=1.5, dest="stride_s")
    p.add_argument("--shift-s", type=float, default=1.0, dest="shift_s")
    p.add_argument("--trace-hz", type=float, default=30.0, dest="trace_hz")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_window)

    def add_experiment_flags(p, sweep: bool):
        p.add_argument("--windows", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--repeats", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--participants", type=int, default=None)
        p.add_argument("--embed-dim", type=int, default=None, dest="embed_dim")
        p.add_argument("--embed-base", type=float, default=None, dest="embed_base")
        p.add_argument("--force", action="store_true")
        if sweep:
            p.add_argument("--modalities", default=None)
            p.add_argument("--conditionings", default=None)
            p.add_argument("--jobs", type=int, default=None)
            p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="train one configuration on one fold")
    add_experiment_flags(p, sweep=False)
    p.add_argument("--modality", required=True, choices=MODALITIES)
    p.add_argument("--conditioning", default="none",
                   choices=[s.value for s in Strategy])
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a cross-validation sweep")
    add_experiment_flags(p, sweep=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render reports from a folds CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
