"""Command-line entry point: ``vitalwatch <subcommand>``.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import anomaly, evaluation, model, report, series, synth

logger = logging.getLogger("vitalwatch")

OUTPUT_ENV = "VITALWATCH_OUTPUT_DIR"
EXIT_OK, EXIT_PIPELINE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"file not found: {path}")
    return p


def _outdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "vitalwatch-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(data: str, schema: str, interp: str | None = "nearest_window", max_gap: int = 5) -> series.SeriesFrame:
    roles = series.load_schema(_existing(schema))
    frame = series.ingest_csv(_existing(data), roles)
    if interp:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            frame = series.interpolate(frame, interp, max_gap)
    return frame


def _model_config(args) -> model.ModelConfig:
    base = model.ModelConfig.full_scale() if args.full_scale else model.ModelConfig()
    overrides = {
        "n_blocks": args.blocks,
        "embed_dim": args.dim,
        "heads": args.heads,
        "window": args.window,
        "future_len": args.future,
        "patch_size": args.patch,
        "gate": args.gate,
        "seed": args.seed,
    }
    return model.ModelConfig(**{**asdict(base), **{k: v for k, v in overrides.items() if v is not None}})


def _split(frame: series.SeriesFrame, fraction: float) -> int:
    return int(round(frame.T * fraction))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _train_one(data: str, args, out: Path) -> Path:
    frame = _load(data, args.schema, args.interpolation, args.max_gap)
    cut = _split(frame, args.train_fraction)
    cfg = _model_config(args)
    trained = model.train(frame.slice_rows(0, cut), cfg, epochs=args.epochs, lr=args.lr,
                          lr_decay=args.lr_decay, batch_size=args.batch_size, anomaly_type_id=args.anomaly_type)
    ckpt = out / "model.ckpt"
    trained.save(ckpt, extra={"train_fraction": str(args.train_fraction), "data": Path(data).name})
    return ckpt


def cmd_train(args) -> int:
    out = _outdir(args)
    _existing(args.schema)
    for d in args.data:
        _existing(d)
    targets = [(d, out if len(args.data) == 1 else out / Path(d).stem) for d in args.data]
    for _, o in targets:
        o.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            paths = list(pool.map(_train_one, [d for d, _ in targets], [args] * len(targets), [o for _, o in targets]))
    else:
        paths = [_train_one(d, args, o) for d, o in targets]
    for p in paths:
        print(f"checkpoint {p}  manifest {p}.manifest")
    return EXIT_OK


def cmd_detect(args) -> int:
    out = _outdir(args)
    trained = model.TrainedModel.load(_existing(args.checkpoint))
    meta = model.read_manifest(Path(args.checkpoint + ".manifest"))
    frame = _load(args.data, args.schema, args.interpolation, args.max_gap)
    if args.calibrate_on:
        calib_frame = _load(args.calibrate_on, args.schema, args.interpolation, args.max_gap)
        detect_frame, offset = frame, 0
    else:
        cut = _split(frame, float(meta.get("train_fraction", 0.8)))
        calib_frame, detect_frame, offset = frame.slice_rows(0, cut), frame.slice_rows(cut, frame.T), cut
    if args.anomaly_type is not None:
        trained = model.with_anomaly_type(trained, args.anomaly_type)
    calib = anomaly.score(calib_frame, trained)
    threshold = anomaly.fit_pot(calib, args.q, args.u_quantile, force_fallback=args.threshold_fallback_only)
    if threshold.fallback:
        logger.warning("threshold from empirical quantile fallback: tau=%.6g", threshold.tau)
    scores = anomaly.score(detect_frame, trained)
    events = anomaly.detect(scores, threshold, trained.anomaly_type_id)
    # indices in the log refer to rows of --data
    events = [anomaly.AnomalyEvent(e.start + offset, e.end + offset, e.start_time, e.end_time, e.peak_index + offset,
                                   e.peak_score, e.channels_ranked, e.anomaly_type_id) for e in events]
    anomaly.write_scores(out / "scores.csv", scores)
    anomaly.write_events(out / "events.jsonl", events, threshold)
    (out / "threshold.json").write_text(json.dumps(anomaly.threshold_dict(threshold), indent=2, sort_keys=True) + "\n")
    print(f"tau={threshold.tau:.6g} (q={threshold.q:g}, u={threshold.u:.4g}, xi={threshold.xi:.3f}, "
          f"sigma={threshold.sigma:.4g}, fallback={threshold.fallback})")
    print(f"{'type':<20}{'events':>8}{'max peak':>12}")
    by_type: dict[str, list[float]] = {}
    for e in events:
        by_type.setdefault(e.anomaly_type, []).append(e.peak_score)
    for kind, peaks in sorted(by_type.items()):
        print(f"{kind:<20}{len(peaks):>8}{max(peaks):>12.4g}")
    print(f"{'total':<20}{len(events):>8}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _outdir(args)
    records = anomaly.read_events(_existing(args.events))
    frame = _load(args.data, args.schema, interp=None)
    patient = series.parse_keyvalue(_existing(args.patient).read_text(encoding="utf-8")) if args.patient else {}
    events = [report.EventView.from_record(r) for r in records]
    written = report.write_bundle(out, events, frame, patient, figures=not args.no_figures)
    print((out / "summary.txt").read_text().strip())
    print(f"{len(written)} file(s) in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    frame = _load(args.data, args.schema, interp=None)
    labels = _read_labels(_existing(args.labels), frame)
    det = evaluation.ModelDetector(
        _model_config(args), epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        q=args.q, u_quantile=args.u_quantile, interpolation=args.interpolation, max_gap=args.max_gap,
        force_fallback=args.threshold_fallback_only,
    )
    rep = evaluation.kfold_f1(frame, labels, det, folds=args.folds)
    out = _outdir(args)
    rep.write(out / "eval_report.json")
    f1, fpr = rep.f1, rep.fpr
    print(f"F1 {f1[0]:.3f} +/- {f1[1]:.3f}   FPR {fpr[0]:.4f}   FNR {rep.fnr[0]:.4f}   ({args.folds} folds)")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    frame = _load(args.data, args.schema, interp=None)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        filled = series.interpolate(frame, args.method, args.max_gap)
    for w in caught:
        logger.warning("%s", w.message)
    before, after = int(frame.missing.sum()), int(filled.missing.sum())
    series.write_csv(args.output, filled)
    print(f"filled {before - after} of {before} missing cells; wrote {args.output}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    out = _outdir(args)
    profile = synth.PatientProfile.from_file(_existing(args.profile)) if args.profile else synth.PatientProfile()
    frame, events = synth.synth_patient(profile, args.days, args.seed)
    series.write_csv(out / "data.csv", frame)
    series.write_schema(out / "schema.cfg", frame)
    (out / "injected.json").write_text(
        json.dumps([{"kind": e.kind, "start_index": e.start, "length": e.length} for e in events], indent=2) + "\n")
    labels = synth.event_labels(frame.T, events)
    (out / "labels.csv").write_text(
        "timestamp,label\n" + "".join(f"{t:.0f},{int(v)}\n" for t, v in zip(frame.timestamps, labels)))
    print(f"{frame.T} rows, {len(events)} injected episode(s) -> {out}")
    return EXIT_OK


def _read_labels(path: Path, frame: series.SeriesFrame) -> np.ndarray:
    rows = [line.split(",") for line in path.read_text().splitlines()[1:] if line.strip()]
    lookup = {round(float(t)): int(v) for t, v in rows}
    return np.array([bool(lookup.get(round(t), 0)) for t in frame.timestamps])


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    g.add_argument("--epochs", type=int, default=2)
    g.add_argument("--lr", type=float, default=5e-4)
    g.add_argument("--lr-decay", type=float, default=0.9)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--blocks", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--future", type=int)
    g.add_argument("--patch", type=int)
    g.add_argument("--gate", choices=("scalar", "vector"))
    g.add_argument("--full-scale", action="store_true", help="3 blocks, d=128, 8 heads")


def _data_flags(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--data", required=True, nargs="+")
    else:
        p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--interpolation", default="nearest_window", choices=("nearest_window", "nearest_neighbor"))
    p.add_argument("--max-gap", type=int, default=5)


def _threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--q", type=float, default=1e-3, help="POT risk")
    p.add_argument("--u-quantile", type=float, default=0.98)
    p.add_argument("--threshold-fallback-only", action="store_true",
                   help="skip the GPD fit and use the empirical 1-q quantile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitalwatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a per-patient imputation model")
    _data_flags(p, multi=True)
    _model_flags(p)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--anomaly-type", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score a series and write events")
    _data_flags(p)
    _threshold_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibrate-on", help="CSV whose scores calibrate the threshold (default: training split)")
    p.add_argument("--anomaly-type", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="explanation prompts, excerpts and figures per event")
    p.add_argument("--events", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--patient", help="key=value patient metadata")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="blocked k-fold F1 against a label CSV")
    _data_flags(p)
    _model_flags(p)
    _threshold_flags(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate", help="fill short gaps")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--method", default="nearest_window", choices=("nearest_window", "nearest_neighbor"))
    p.add_argument("--max-gap", type=int, default=5)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("synthesize", help="generate a synthetic patient")
    p.add_argument("--profile")
    p.add_argument("--days", type=float, default=14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, series.SeriesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # single-line diagnostic, stable exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
