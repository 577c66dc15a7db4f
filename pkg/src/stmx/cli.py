"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench, contrastive, model as mdl, retrieval
from . import weights as wio

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _size(text):
    try:
        t, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 8x14x14, got {text!r}") from None
    return t, h, w


def _emit(args, text):
    print(text, end="" if text.endswith("\n") else "\n")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _load_config(path):
    if path is None:
        return mdl.tiny_desk()
    try:
        return mdl.load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except mdl.ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_reparam_check(args):
    cfg = _load_config(args.config)
    diffs = mdl.fusion_deviation(cfg, args.trials, args.seed)
    worst, median = float(diffs.max()), float(np.median(diffs))
    ok = worst <= args.tol
    lines = [
        f"config {cfg.digest()}  trials {args.trials}  seed {args.seed}",
        f"max deviation    {worst:.3e}",
        f"median deviation {median:.3e}",
        f"tolerance        {args.tol:.3e}",
        "PASS" if ok else "FAIL",
    ]
    _emit(args, "\n".join(lines))
    if args.save_weights:
        fused, _ = mdl.reparameterize_model(mdl.init_model(cfg, args.seed))
        with open(args.save_weights, "wb") as fh:
            fh.write(mdl.save_weights(fused))
    return EXIT_OK if ok else EXIT_CHECK


def _write_samples(path, records):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in bench.record_dicts(records):
                fh.write(json.dumps(rec) + "\n")


def cmd_bench(args):
    try:
        spec = bench.BenchSpec(args.module, *args.size, args.dim, args.layers, args.warmup, args.iters, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = bench.run_grid([spec])
    _emit(args, bench.format_csv(records))
    _write_samples(args.samples, records)
    return EXIT_OK if records[0].ok else EXIT_CHECK


def _read_grid(path, warmup, iters, seed):
    specs = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read grid: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("module"):
            continue
        fields = [f.strip() for f in line.split(",")]
        try:
            module, t, h, w, c, layers = fields[0], *(int(f) for f in fields[1:6])
            if len(fields) != 6:
                raise ValueError("expected module,t,h,w,c,layers")
            specs.append(bench.BenchSpec(module, t, h, w, c, layers, warmup, iters, seed))
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return specs


def cmd_bench_grid(args):
    if args.default == bool(args.grid):
        raise UsageError("give exactly one of --default or --grid FILE")
    try:
        if args.default:
            specs = bench.default_grid(args.warmup, args.iters, args.seed)
        else:
            specs = _read_grid(args.grid, args.warmup, args.iters, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def progress(rec):
        status = f"{rec.median_ms:.3f} ms" if rec.ok else f"error: {rec.error}"
        print(f"[{rec.spec.label()}] {status}", file=sys.stderr)

    records = bench.run_grid(specs, parallel=args.parallel, progress=None if args.quiet else progress)
    text = bench.format_csv(records)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    _write_samples(args.samples, records)
    return EXIT_OK


def cmd_trend_check(args):
    try:
        with open(args.report, encoding="utf-8") as fh:
            rows = bench.parse_report(fh.read())
        if args.thresholds:
            with open(args.thresholds, encoding="utf-8") as fh:
                th = bench.parse_thresholds(fh.read())
        else:
            th = bench.default_thresholds()
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    results = bench.trend_check(rows, th)
    _emit(args, "\n".join(f"{r.status.upper():8s} {r.name}: {r.detail}" for r in results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_train_toy(args):
    cfg = _load_config(args.config)
    try:
        tcfg = contrastive.TrainConfig(
            lr=args.lr, epochs=args.epochs, max_steps=args.steps, batch_size=args.batch_size,
            warmup=args.warmup, seed=args.seed, tau=args.tau,
            trainable=tuple(args.trainable or ("head.weight",)),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = mdl.init_model(cfg, args.seed)
    data = contrastive.make_cluster_dataset(cfg, k=args.clusters, per_cluster=args.per_cluster, seed=args.seed)
    try:
        result = contrastive.train_toy(model, data, tcfg, log_path=args.out)
    except contrastive.BudgetError as exc:
        raise UsageError(str(exc)) from None
    for rec in result.records:
        print(f"step {rec['step']:4d}  loss {rec['loss']:.6f}  R@1 t2v {rec['r1_t2v']:.3f} "
              f"v2t {rec['r1_v2t']:.3f}  tau {rec['tau']:.4f}")
    print(f"initial loss {result.initial_loss:.6f}  final loss {result.final_loss:.6f}  "
          f"held-out T2V R@1 {result.final_r1:.3f}")
    if args.weights_out:
        with open(args.weights_out, "wb") as fh:
            fh.write(mdl.save_weights(result.model))
    return EXIT_OK


def _read_emb(path):
    try:
        return retrieval.read_embeddings(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except (retrieval.EmbeddingParseError, wio.WeightFormatError) as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args):
    videos = _read_emb(args.videos)
    try:
        if args.candidates:
            if not args.answers or not args.num_candidates:
                raise UsageError("multiple choice needs --candidates, --answers and --num-candidates")
            cands = _read_emb(args.candidates)
            k = args.num_candidates
            if cands.shape[0] != k * videos.shape[0]:
                raise UsageError(f"expected {k * videos.shape[0]} candidate rows, found {cands.shape[0]}")
            try:
                with open(args.answers, encoding="utf-8") as fh:
                    answers = [int(line) for line in fh.read().split()]
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read answers: {exc}") from None
            acc = retrieval.multiple_choice_accuracy(videos, cands.reshape(len(videos), k, -1), answers)
            _emit(args, f"MC accuracy {acc:.4f}")
            return EXIT_OK
        if not args.texts:
            raise UsageError("give --texts for retrieval or --candidates for multiple choice")
        texts = _read_emb(args.texts)
        if texts.shape != videos.shape:
            raise UsageError(f"videos {videos.shape} and texts {texts.shape} must pair row by row")
        r1 = retrieval.retrieval_r1(videos, texts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(args, f"T2V R@1 {r1['t2v']:.4f}\nV2T R@1 {r1['v2t']:.4f}")
    return EXIT_OK


def cmd_inspect_weights(args):
    try:
        with open(args.file, "rb") as fh:
            tensors, meta, config_text = wio.unpack(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read {args.file}: {exc}") from None
    except wio.WeightFormatError as exc:
        raise UsageError(f"{args.file}: {type(exc).__name__}: {exc}") from None
    lines = [f"{k}: {v}" for k, v in meta.items()]
    if "fused" in meta:
        lines.append(f"form: {'fused' if meta['fused'] == '1' else 'train'}")
    lines.append(f"tensors: {len(tensors)}  scalars: {sum(a.size for a in tensors.values())}")
    lines += [f"  {name:40s} {'x'.join(map(str, a.shape)) or 'scalar'}" for name, a in tensors.items()]
    _emit(args, "\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", metavar="PATH", help="also write the command's output to PATH")

    p = argparse.ArgumentParser(prog="stmx", description="Spatiotemporal reparameterization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("reparam-check", parents=[common], help="train-vs-fused equivalence over random draws")
    s.add_argument("--config", metavar="PATH", help="model config (default: tiny-desk)")
    s.add_argument("--trials", type=_positive_int, default=50)
    s.add_argument("--tol", type=_non_negative_float, default=1e-4)
    s.add_argument("--save-weights", metavar="PATH", help="write a fused model store")
    s.set_defaults(func=cmd_reparam_check)

    def timing(sp):
        sp.add_argument("--warmup", type=_positive_int, default=10)
        sp.add_argument("--iters", type=int, default=100, help="timed iterations (>= 10)")
        sp.add_argument("--samples", metavar="PATH", help="write raw per-iteration samples as JSON lines")

    s = sub.add_parser("bench", parents=[common], help="time one block stack")
    s.add_argument("--module", required=True, choices=bench.MODULES + tuple(bench.ALIASES))
    s.add_argument("--size", type=_size, default=(8, 14, 14), help="TxHxW token grid (default 8x14x14)")
    s.add_argument("--dim", type=_positive_int, default=512)
    s.add_argument("--layers", type=_positive_int, default=1)
    timing(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("bench-grid", parents=[common], help="run a latency grid and write a CSV report")
    s.add_argument("--default", action="store_true", help="the size x dim x module grid plus the layer sweep")
    s.add_argument("--grid", metavar="FILE", help="CSV lines module,t,h,w,c,layers")
    s.add_argument("--parallel", type=int, default=0, help="worker processes (default: sequential)")
    s.add_argument("--quiet", action="store_true")
    timing(s)
    s.set_defaults(func=cmd_bench_grid)

    s = sub.add_parser("trend-check", parents=[common], help="assert latency trends on a report")
    s.add_argument("report")
    s.add_argument("--thresholds", metavar="PATH", help="threshold config (default: shipped trend.cfg)")
    s.set_defaults(func=cmd_trend_check)

    s = sub.add_parser("train-toy", parents=[common], help="finite-difference fine-tuning on synthetic clusters")
    s.add_argument("--config", metavar="PATH")
    s.add_argument("--lr", type=_non_negative_float, default=0.01)
    s.add_argument("--epochs", type=_positive_int, default=8)
    s.add_argument("--steps", type=_positive_int, help="stop after this many steps")
    s.add_argument("--batch-size", type=_positive_int, default=4)
    s.add_argument("--warmup", type=float, default=0.1, help="warmup fraction of total steps")
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--trainable", action="append", metavar="GLOB", help="parameter name pattern (repeatable)")
    s.add_argument("--clusters", type=_positive_int, default=4)
    s.add_argument("--per-cluster", type=_positive_int, default=4)
    s.add_argument("--weights-out", metavar="PATH")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", parents=[common], help="Recall@1 or multiple-choice accuracy from embedding files")
    s.add_argument("--videos", required=True)
    s.add_argument("--texts")
    s.add_argument("--candidates")
    s.add_argument("--answers")
    s.add_argument("--num-candidates", type=_positive_int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-weights", parents=[common], help="list tensors in an STMX store")
    s.add_argument("file")
    s.set_defaults(func=cmd_inspect_weights)
    return p


def _check_output_paths(args):
    for flag in ("out", "samples", "weights_out", "save_weights"):
        path = getattr(args, flag, None)
        if path and not os.path.isdir(os.path.dirname(os.path.abspath(path))):
            raise UsageError(f"--{flag.replace('_', '-')}: directory of {path} does not exist")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _check_output_paths(args)
        return args.func(args)
    except UsageError as exc:
        print(f"stmx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"stmx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
