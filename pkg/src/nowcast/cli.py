"""Command-line entry point.

Exit codes: 0 success, 1 self-check failure, 2 data error, 3 config error.
``NOWCAST_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .config import ConfigError, ToolkitConfig, load_config
from .dataset import (RainEvent, SplitManifest, StormSpec, extract_events, read_manifest,
                      sample_windows, split_events, synthesize_storms, write_events_csv, write_manifest)
from .fields import FieldSequence, FormatError, encode_tpnn, read_sequence, write_sequence
from .metrics import POOLS, THRESHOLDS, AlignmentError, evaluate_run
from .model import WeightsError, WeightsMismatch, check_params, load_weights, nowcast, save_weights
from .training import TrainingDiverged, TrainingSet, train_evolver, train_ved, write_log_csv

log = logging.getLogger("nowcast")

EXIT_OK, EXIT_SELFCHECK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3


class DataError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# --- extract ----------------------------------------------------------------


def cmd_extract(args) -> int:
    if not args.tau > 0:
        raise ConfigError(f"--tau must be > 0, got {args.tau}")
    seq = read_sequence(args.input)
    if seq.step_seconds != 600:
        raise DataError(f"{args.input}: event extraction needs 600 s cadence, got {seq.step_seconds}")
    events = extract_events(seq, args.tau, source=Path(args.input).stem)
    manifest = split_events(events, seed=args.seed) if len(events) >= 3 else None
    write_events_csv(events, args.out, manifest)
    print(f"events={len(events)} out={args.out}")
    return EXIT_OK


# --- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    events = []
    for i in range(args.events):
        flow = tuple(np.array([1.5, 0.5]) + rng.uniform(-0.3, 0.3, 2))
        spec = StormSpec(n=args.n, frames=args.frames, flow=flow, amplitude=(20.0, 80.0),
                         growth=(0.03, 0.06), start=i * args.frames * 6000)
        storm = synthesize_storms(spec, seed=int(rng.integers(2**31)))
        name = f"storm{i:04d}"
        write_sequence(storm.sequence, out / f"{name}.tpnn")
        ts = storm.sequence.timestamps
        events.append(RainEvent(int(ts[0]), int(ts[-1]), name,
                                float(storm.sequence.to_array().sum(dtype=np.float64))))
    write_manifest(split_events(events, seed=args.seed), out / "manifest.csv")
    print(f"sequences={args.events} out={out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _load_data_dir(path: str, seed: int):
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"data directory {path} does not exist")
    files = sorted(root.glob("*.tpnn"))
    if not files:
        raise DataError(f"no .tpnn sequences in {path}")
    sequences = {f.stem: read_sequence(f) for f in files}
    manifest_path = root / "manifest.csv"
    if manifest_path.exists():
        manifest = read_manifest(manifest_path, seed=seed)
    else:
        events = [RainEvent(int(s.timestamps[0]), int(s.timestamps[-1]), name, 0.0)
                  for name, s in sequences.items()]
        manifest = split_events(events, seed=seed) if len(events) >= 3 else SplitManifest(tuple(events), (), ())
    missing = {e.source for e in manifest.train} - set(sequences)
    if missing:
        raise DataError(f"manifest names unknown sequences: {sorted(missing)[:3]}")
    return sequences, manifest


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ToolkitConfig()
    if args.seed is not None:
        cfg = replace(cfg, training=replace(cfg.training, seed=args.seed))
    if args.steps is not None:
        cfg = replace(cfg, training=replace(cfg.training, steps=args.steps))
    params = None
    if args.stage == "evolver":
        if not args.init or not Path(args.init).exists():
            raise ConfigError("stage evolver needs trained VED weights (--init)")
        params, wcfg = load_weights(args.init)
        if wcfg != cfg.model:
            raise ConfigError("--init weights were trained with a different model config")
        check_params(params, cfg.model)
    sequences, manifest = _load_data_dir(args.data, cfg.training.seed)
    m, t = cfg.model, cfg.training
    horizon = m.horizon if args.stage == "evolver" else 1
    windows = list(sample_windows(manifest, sequences, m.context_frames, horizon, "train"))
    if not windows:
        raise DataError("no training windows: events are shorter than context + horizon")
    data = TrainingSet.from_windows(windows, cfg.flow, t.crop_margin)
    try:
        if args.stage == "ved":
            res = train_ved(data, m, cfg.losses, steps=t.steps, batch=t.batch, lr=t.lr, seed=t.seed)
        else:
            res = train_evolver(data, m, params, steps=t.steps, batch=t.batch, lr=t.lr, seed=t.seed)
    except TrainingDiverged as exc:
        save_weights(exc.params, m, args.weights)
        return _fail(EXIT_DATA, f"{exc}; wrote {args.weights}")
    save_weights(res.params, m, args.weights)
    log_path = args.log or str(Path(args.weights).with_suffix(".loss.csv"))
    write_log_csv(res.log, log_path)
    curve = res.curve(args.stage)
    print(f"stage={args.stage} steps={t.steps} windows={len(data)} "
          f"loss_first={float(curve[0])!r} loss_last={float(curve[-1])!r} weights={args.weights} log={log_path}")
    return EXIT_OK


# --- nowcast ----------------------------------------------------------------


def cmd_nowcast(args) -> int:
    try:
        params, mcfg = load_weights(args.weights)
    except OSError as exc:
        raise DataError(f"cannot read weights {args.weights}: {exc}") from None
    check_params(params, mcfg)
    seq = read_sequence(args.input)
    if len(seq) != mcfg.context_frames:
        raise ConfigError(f"weights expect {mcfg.context_frames} context frames, input has {len(seq)}")
    if seq.n % mcfg.reduc_factor:
        raise ConfigError(f"grid n={seq.n} is not divisible by reduc_factor {mcfg.reduc_factor}")
    out = nowcast(params, seq, mcfg)
    write_sequence(FieldSequence(tuple(out.frames), seq.step_seconds), args.out)
    ts = np.array([f.timestamp for f in out.frames], dtype=np.int64)
    if args.fields:
        # two frames per lead: u at t_k, v at t_k + 1 s (px per step, +u east, +v south)
        flow = np.stack([c for mf in out.motions for c in (mf.u, mf.v)]).astype(np.float32)
        stamps = np.stack([ts, ts + 1], axis=1).ravel()
        Path(args.fields).write_bytes(encode_tpnn(stamps, seq.step_seconds, flow))
    if args.intensity:
        inten = np.stack([f.values for f in out.intensities]).astype(np.float32)
        Path(args.intensity).write_bytes(encode_tpnn(ts, seq.step_seconds, inten))
    print(f"leads={len(out.frames)} out={args.out}")
    return EXIT_OK


# --- evaluate ---------------------------------------------------------------


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    for d in (pred_dir, truth_dir):
        if not d.is_dir():
            raise DataError(f"directory {d} does not exist")
    pred_files = {f.name for f in pred_dir.glob("*.tpnn")}
    truth_files = {f.name for f in truth_dir.glob("*.tpnn")}
    if pred_files != truth_files:
        odd = sorted(pred_files ^ truth_files)
        raise AlignmentError(f"prediction/truth file sets differ: {odd[:5]}")
    if not pred_files:
        raise DataError("no .tpnn files to evaluate")
    names = sorted(pred_files)
    fc, ob, step = [], [], None
    for name in names:
        p, t = read_sequence(pred_dir / name), read_sequence(truth_dir / name)
        if len(p) != len(t):
            raise AlignmentError(f"{name}: {len(p)} predicted leads vs {len(t)} truth frames")
        step = step or p.step_seconds
        fc.append(list(p.frames))
        ob.append(list(t.frames))
    horizon = len(fc[0])
    leads = [float(k * step // 60) for k in range(1, horizon + 1)]
    table = evaluate_run(fc, ob, leads, THRESHOLDS, POOLS, names)
    table.write_csv(args.out)
    curves = args.curves or str(Path(args.out).with_suffix("")) + "_curves.csv"
    table.write_curves_csv(curves)
    print(f"events={len(names)} leads={horizon} out={args.out} curves={curves}")
    return EXIT_OK


# --- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    for r in results:
        print(r.line())
    failed = [r.component for r in results if not r.ok]
    if failed:
        return _fail(EXIT_SELFCHECK, f"gradient check failed: {' '.join(failed)}")
    return EXIT_OK


# --- entry ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nowcast", description="Motion/intensity precipitation nowcasting toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="find rainy windows in a TPNN sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--tau", type=float, required=True, help="accumulation threshold (sum over pixels and 7 frames)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic storm corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--events", type=int, default=20)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", choices=("ved", "evolver"), required=True)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True, help="output TPNW file")
    p.add_argument("--init", help="VED weights to start the evolver stage from")
    p.add_argument("--log", help="loss CSV (default: <weights>.loss.csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("nowcast", help="roll a trained model forward")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fields", help="per-lead flow as TPNN, frames u,v per lead")
    p.add_argument("--intensity", help="per-lead intensity correction as TPNN")
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("evaluate", help="CSI/HSS tables for prediction vs truth directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference self-test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("NOWCAST_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        return _fail(EXIT_CONFIG, f"NOWCAST_THREADS must be a positive integer, got {threads!r}")
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except WeightsMismatch as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (FormatError, WeightsError, AlignmentError, DataError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
