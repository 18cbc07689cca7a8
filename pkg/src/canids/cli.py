"""``canids`` command line: simulate, ingest, build-windows, train, score, eval, sweep, bench.

Exit codes: 0 success, 2 usage/input error, 3 training failure,
4 artifact inconsistency (vocabulary, window length, checkpoint).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .canio import FrameParseError, Label, read_frames, write_frames
from .checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from .detect import DetectConfig, bench_latency, evaluate, score_windows, sweep, sweep_csv
from .model import CanBertModel, ModelConfig
from .traffic_sim import Scenario, suite_scenarios
from .training import TrainConfig, TrainingDiverged, fit
from .windowing import (IdVocabulary, build_vocab, read_shard, slide_windows, split_train_valid,
                        tokenize, write_shard)

log = logging.getLogger("canids")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_ARTIFACT = 0, 2, 3, 4


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _load_frames(path: str, fmt: str, lenient: bool = False):
    try:
        return read_frames(_existing(path), fmt, strict=not lenient).frames
    except FrameParseError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------- simulate


def _scenarios_from_file(path: Path) -> dict[str, Scenario]:
    raw = json.loads(path.read_text())
    if "streams" in raw:
        return {name: Scenario.from_json(json.dumps(sc)) for name, sc in raw["streams"].items()}
    if "profiles" in raw:
        return {"scenario": Scenario.from_json(path.read_text())}
    return suite_scenarios(int(raw.get("seed", 0)), float(raw.get("scale", 1.0)),
                           int(raw.get("n_ecus", 40)))


def cmd_simulate(args) -> int:
    if args.scenario:
        try:
            scenarios = _scenarios_from_file(_existing(args.scenario))
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad scenario file {args.scenario}: {exc}") from exc
    else:
        scenarios = suite_scenarios(args.seed, args.scale, args.ecus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if args.format == "dataset-csv" else "log"
    files = {}
    for name, sc in scenarios.items():
        frames = sc.run()
        path = out / f"{name}.{ext}"
        path.write_bytes(write_frames(frames, args.format))
        attacks = sum(f.label is Label.ATTACK for f in frames)
        files[name] = {"path": path.name, "frames": len(frames), "attack_frames": attacks,
                       "sha256": _sha256(path), "scenario": json.loads(sc.to_json())}
        log.info("%s: %d frames (%d attack) -> %s", name, len(frames), attacks, path)
    _write_json(out / "manifest.json", {"command": "simulate", "seed": args.seed,
                                        "scale": args.scale, "format": args.format,
                                        "files": files, "version": __version__})
    return EXIT_OK


# ---------------------------------------------------------------- ingest / build-windows


def cmd_ingest(args) -> int:
    try:
        parsed = read_frames(_existing(args.input), args.format, strict=not args.lenient)
    except FrameParseError as exc:
        raise UsageError(f"{args.input}: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(write_frames(parsed.frames, "dataset-csv"))
    meta = vars(parsed.meta) | {"errors": len(parsed.errors),
                                "monotonicity_warnings": parsed.monotonicity_warnings,
                                "first_errors": [str(e) for e in parsed.errors[:20]],
                                "source_path": str(args.input)}
    _write_json(out.with_suffix(".meta.json"), meta)
    log.info("ingested %d frames (%d errors)", len(parsed.frames), len(parsed.errors))
    return EXIT_OK


def _vocab_for(args, frames) -> IdVocabulary:
    if getattr(args, "vocab", None):
        return IdVocabulary.from_json(_existing(args.vocab).read_text())
    return build_vocab(frames)


def cmd_build_windows(args) -> int:
    frames = _load_frames(args.data, args.format, args.lenient)
    vocab = _vocab_for(args, frames)
    tokens, labels = tokenize(frames, vocab)
    try:
        windows = slide_windows(tokens, labels, args.T, args.stride)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_shard(windows, out, stride=args.stride, vocab=vocab)
    if not args.vocab:
        out.with_suffix(".vocab.json").write_text(vocab.to_json())
    log.info("%d windows of T=%d -> %s", len(windows), args.T, out)
    return EXIT_OK


# ---------------------------------------------------------------- train


def _model_config(args, total_tokens: int) -> ModelConfig:
    return ModelConfig(total_tokens=total_tokens, T=args.T, L=args.layers, d=args.d_model,
                       d_ff=args.d_ff, h=args.heads, p_drop=args.dropout)


def train_config_from_args(args) -> TrainConfig:
    return TrainConfig(mask_ratio=args.mask_ratio, batch_size=args.batch_size, lr=args.lr,
                       max_epochs=args.max_epochs, patience=args.patience, seed=args.seed,
                       valid_fraction=args.valid_fraction)


def cmd_train(args) -> int:
    frames = _load_frames(args.data, args.format, args.lenient)
    if any(f.label is Label.ATTACK for f in frames):
        raise UsageError("training data must be attack-free")
    vocab = _vocab_for(args, frames)
    tokens, labels = tokenize(frames, vocab)
    try:
        windows = slide_windows(tokens, labels, args.T, args.stride)
        tcfg = train_config_from_args(args)
        mcfg = _model_config(args, vocab.total_tokens)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train, valid = split_train_valid(windows, tcfg.valid_fraction, tcfg.seed)
    train = train[:: args.train_stride]
    if args.max_train_windows:
        train = train[: args.max_train_windows]
    if args.max_valid_windows:
        valid = valid[:: max(1, len(valid) // args.max_valid_windows)][: args.max_valid_windows]
    log.info("vocab M=%d, %d train / %d valid windows", vocab.M, len(train), len(valid))
    model = CanBertModel(mcfg, seed=args.seed)
    try:
        model, report = fit(model, train, valid, tcfg)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_TRAIN
    out = Path(args.out)
    run = {"command": "train", "data": str(args.data), "data_sha256": _sha256(Path(args.data)),
           "stride": args.stride, "train_stride": args.train_stride,
           "max_train_windows": args.max_train_windows, "version": __version__}
    save_checkpoint(model, vocab, out, extra={"train_config": tcfg.to_dict(), "run": run})
    rep = report.to_dict() | {"run": run, "checkpoint_hash": checkpoint_hash(model, vocab),
                              "parameter_count": model.parameter_count()}
    _write_json(out / "training_report.json", rep)
    if args.report:
        _write_json(Path(args.report), rep)
    log.info("best epoch %d (valid %.4f), stopped at %d: %s", report.best_epoch,
             report.best_valid_loss, report.stopped_epoch, report.stop_reason)
    return EXIT_OK


# ---------------------------------------------------------------- score / eval / sweep / bench


def _load_model(path: str):
    try:
        return load_checkpoint(_existing(path))
    except CheckpointError as exc:
        raise ArtifactError(str(exc)) from exc


def detect_config_from_args(args) -> DetectConfig:
    return DetectConfig(k=args.candidates, mask_ratio=args.mask_ratio, passes=args.passes,
                        decision=args.decision, seed=args.seed, oov_policy=args.oov_policy,
                        threads=args.threads)


def _windows_for(args, model, vocab, data: str):
    if args.vocab and IdVocabulary.from_json(_existing(args.vocab).read_text()).digest() != vocab.digest():
        raise ArtifactError("--vocab does not match the checkpoint vocabulary")
    if data.endswith(".bin"):
        try:
            windows, manifest = read_shard(_existing(data), vocab)
        except ValueError as exc:
            raise ArtifactError(str(exc)) from exc
    else:
        frames = _load_frames(data, args.format, args.lenient)
        tokens, labels = tokenize(frames, vocab)
        T = args.T or model.cfg.T
        if T != model.cfg.T:
            raise ArtifactError(f"--T {T} does not match checkpoint T={model.cfg.T}")
        windows = slide_windows(tokens, labels, T, args.stride)
    if windows.T != model.cfg.T:
        raise ArtifactError(f"windows have T={windows.T}, checkpoint expects {model.cfg.T}")
    if args.max_windows and len(windows) > args.max_windows:
        windows = windows[: args.max_windows]
    return windows


def cmd_score(args) -> int:
    model, vocab, manifest = _load_model(args.checkpoint)
    windows = _windows_for(args, model, vocab, args.data)
    cfg = detect_config_from_args(args)
    try:
        scores = score_windows(model, vocab, windows, cfg)
    except ValueError as exc:
        raise ArtifactError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["origin,label,abnormal,miss_fraction"]
    for o, y, a, s in zip(windows.origins, windows.sequence_labels, scores.abnormal,
                          scores.miss_fraction):
        lines.append(f"{o},{y},{int(a)},{s:.6f}")
    out.write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab, manifest = _load_model(args.checkpoint)
    cfg = detect_config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for data in args.data:
        windows = _windows_for(args, model, vocab, data)
        try:
            rep = evaluate(model, vocab, windows, cfg)
        except ValueError as exc:
            raise ArtifactError(str(exc)) from exc
        name = Path(data).stem
        meta = {"checkpoint_hash": manifest["checkpoint_hash"], "data": data,
                "data_sha256": _sha256(Path(data)), "T": windows.T, "windows": len(windows)}
        rep.config = cfg.to_dict() | meta
        (out / f"{name}.report.json").write_text(rep.to_json())
        (out / f"{name}.scores.csv").write_text(
            rep.scores_csv(windows.origins, windows.sequence_labels))
        summary[name] = rep.summary()
        log.info("%s: P=%.4f R=%.4f F1=%.4f (tp=%d fp=%d tn=%d fn=%d)", name, rep.precision,
                 rep.recall, rep.f1, rep.tp, rep.fp, rep.tn, rep.fn)
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_sweep(args) -> int:
    entries = []
    for ckpt in args.checkpoints:
        model, vocab, _ = _load_model(ckpt)
        windows = {Path(d).stem: _windows_for(args, model, vocab, d) for d in args.data}
        entries.append({"model": model, "vocab": vocab, "windows": windows})
    try:
        rows = sweep(entries, detect_config_from_args(args))
    except ValueError as exc:
        raise ArtifactError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sweep_csv(rows))
    out.with_suffix(".json").write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, vocab, manifest = _load_model(args.checkpoint)
    rows = bench_latency(model.cfg, args.T_values, repeats=args.repeats)
    report = {"parameter_count": model.parameter_count(),
              "checkpoint_hash": manifest["checkpoint_hash"], "M": vocab.M,
              "model_size_mb": manifest["weights_bytes"] / 1e6, "latency": rows,
              "soft_budget_ms_T32": args.budget_ms}
    print(f"parameters: {model.parameter_count():,}", file=sys.stderr)
    for r in rows:
        flag = ""
        if r["T"] == 32 and r["mean_ms"] > args.budget_ms:
            flag = "  WARNING: above soft budget"
            log.warning("T=32 mean latency %.2f ms exceeds %.1f ms", r["mean_ms"], args.budget_ms)
        print(f"T={r['T']:4d}  mean {r['mean_ms']:.2f} ms  p95 {r['p95_ms']:.2f} ms{flag}",
              file=sys.stderr)
    if args.out:
        _write_json(Path(args.out), report)
    else:
        print(json.dumps(report, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_data_flags(p):
    p.add_argument("--format", choices=("dataset-csv", "candump"), default="dataset-csv")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")


def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--dropout", type=float, default=0.1)


def _add_detect_flags(p):
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--mask-ratio", type=float, default=0.45)
    p.add_argument("--passes", type=int, default=1)
    p.add_argument("--decision", choices=("any-miss", "all-miss"), default="any-miss")
    p.add_argument("--oov-policy", choices=("unk", "flag"), default="unk")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--vocab", default=None)
    p.add_argument("--max-windows", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("simulate", help="write the synthetic benchmark suite")
    p.add_argument("scenario", nargs="?", default=None, help="scenario JSON (default: built-in suite)")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--ecus", type=int, default=40)
    p.add_argument("--format", choices=("dataset-csv", "candump"), default="dataset-csv")
    p.set_defaults(func=cmd_simulate)

    p = add_parser("ingest", help="parse a capture into canonical dataset CSV")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = add_parser("build-windows", help="tokenize and write a window shard")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=32)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--vocab", default=None)
    _add_data_flags(p)
    p.set_defaults(func=cmd_build_windows)

    p = add_parser("train", help="train on attack-free traffic")
    p.add_argument("data")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--report", default=None)
    p.add_argument("--T", type=int, default=32)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--train-stride", type=int, default=1,
                   help="keep every n-th training window (desk-scale runs)")
    p.add_argument("--max-train-windows", type=int, default=0)
    p.add_argument("--max-valid-windows", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.45)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--vocab", default=None)
    _add_model_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("score", cmd_score, "per-window scores as CSV"),
                                 ("eval", cmd_eval, "detection report against labels")):
        p = add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("data", nargs="+" if name == "eval" else None)
        p.add_argument("--out", required=True)
        _add_detect_flags(p)
        _add_data_flags(p)
        p.set_defaults(func=func)

    p = add_parser("sweep", help="F1 table across checkpoints and attack files")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_detect_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = add_parser("bench", help="parameter count and per-window latency")
    p.add_argument("checkpoint")
    p.add_argument("--T-values", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--budget-ms", type=float, default=25.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CANIDS_LOG", "INFO").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"canids: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArtifactError as exc:
        print(f"canids: inconsistent artifacts: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
