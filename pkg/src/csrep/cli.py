"""``csrep`` command line: build, transform, verify, bench, params, eer.

Exit codes: 0 success, 1 verification failure, 2 usage or parse error,
3 I/O or container format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import container
from .bench import benchmark
from .graph import count_macs, count_params, flop_breakdown, forward, forward_frames, param_breakdown, validate
from .metrics import ScoreFileError, compute_eer, compute_min_dcf, read_scores
from .reptdnn import PAPER_FLOPS, PAPER_PARAMS, ConfigError, RepTdnnConfig, build_rep_tdnn, load_config
from .transform import TrainingModeError, TransformOptions, csrep_transform

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("csrep")


class _Exit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            yield key, json.dumps(v)
        elif v is None:
            yield key, "none"
        else:
            yield key, v


def emit(record: dict, fmt: str, out=None):
    out = out or sys.stdout
    if fmt == "json":
        json.dump(record, out, indent=2, sort_keys=True, default=float)
        out.write("\n")
    else:
        for k, v in _flatten(record):
            out.write(f"{k}={v}\n")


def _load(path):
    try:
        return container.load(path)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except container.ContainerError as exc:
        raise _Exit(EXIT_IO, f"{path}: {exc}") from exc


def _save(model, path):
    try:
        container.save(model, path)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _summary(model, frames=300) -> dict:
    flops = flop_breakdown(model, frames)
    return {
        "params": count_params(model),
        "params_bn_affine_only": count_params(model, bn_stats=False),
        "flops": sum(flops.values()),
        "flops_frames": frames,
        "macs": count_macs(model, frames),
    }


def cmd_build(args) -> int:
    if args.config:
        try:
            config = load_config(args.config)
        except OSError as exc:
            raise _Exit(EXIT_IO, f"cannot read {args.config}: {exc}") from exc
        except ConfigError as exc:
            raise _Exit(EXIT_USAGE, f"{args.config}: {exc}") from exc
    else:
        config = RepTdnnConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    model = build_rep_tdnn(config)
    diags = validate(model)
    _save(model, args.out)
    emit({"out": args.out, "seed": config.seed, "dtype": model.dtype, "diagnostics": len(diags),
          **_summary(model)}, args.format)
    return EXIT_OK


def cmd_transform(args) -> int:
    model = _load(args.in_path)
    stop = 4 if args.stop_after == "full" else int(args.stop_after)
    try:
        plain, report = csrep_transform(model, TransformOptions(stop_after=stop, self_check=args.self_check))
    except TrainingModeError as exc:
        raise _Exit(EXIT_IO, f"{args.in_path}: {exc}") from exc
    _save(plain, args.out)
    emit({"out": args.out, **report.as_dict(), **_summary(plain)}, args.format)
    return EXIT_OK


def cmd_verify(args) -> int:
    a, b = _load(args.a), _load(args.b)
    if a.input_channels != b.input_channels or a.embedding_dim != b.embedding_dim:
        raise _Exit(EXIT_USAGE, f"interface mismatch: inputs {a.input_channels} vs {b.input_channels}, "
                                f"embeddings {a.embedding_dim} vs {b.embedding_dim}")
    dt = np.result_type(a.dtype, b.dtype)
    rng = np.random.default_rng(args.seed)
    max_abs = max_rel = emb_abs = 0.0
    for _ in range(args.trials):
        x = rng.standard_normal((args.batch, a.input_channels, args.frames)).astype(dt)
        fa, fb = forward_frames(a, x), forward_frames(b, x)
        if fa.shape != fb.shape:
            raise _Exit(EXIT_USAGE, f"frame-level outputs differ in shape: {fa.shape} vs {fb.shape}")
        dev = float(np.max(np.abs(fa - fb)))
        max_abs = max(max_abs, dev)
        max_rel = max(max_rel, dev / max(float(np.max(np.abs(fa))), np.finfo(float).tiny))
        emb_abs = max(emb_abs, float(np.max(np.abs(forward(a, x) - forward(b, x)))))
    ok = max(max_abs, emb_abs) <= args.tol
    emit({"max_abs_deviation": max_abs, "max_rel_deviation": max_rel, "embedding_max_abs_deviation": emb_abs,
          "tol": args.tol, "trials": args.trials, "within_tol": ok}, args.format)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    model = _load(args.model)
    try:
        res = benchmark(model, args.batch, args.frames, args.warmup, args.iters, args.threads, args.seed)
    except ValueError as exc:
        raise _Exit(EXIT_USAGE, str(exc)) from exc
    emit(res.as_dict(), args.format)
    return EXIT_OK


def cmd_params(args) -> int:
    model = _load(args.model)
    summary = _summary(model, args.frames)
    emit({**summary,
          "params_breakdown": param_breakdown(model),
          "flops_breakdown": flop_breakdown(model, args.frames),
          "flop_convention": "2 per multiply-accumulate; bias, bn, activation, branch sums itemized",
          "paper_params": PAPER_PARAMS,
          "paper_flops": PAPER_FLOPS,
          "params_ratio_to_paper": summary["params_bn_affine_only"] / PAPER_PARAMS,
          "macs_ratio_to_paper_flops": summary["macs"] / PAPER_FLOPS}, args.format)
    return EXIT_OK


def cmd_eer(args) -> int:
    try:
        trials = read_scores(args.scores)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot read {args.scores}: {exc}") from exc
    except ScoreFileError as exc:
        raise _Exit(EXIT_USAGE, f"{args.scores}: {exc}") from exc
    try:
        eer = compute_eer(trials)
        dcf = compute_min_dcf(trials, args.p_target, args.c_miss, args.c_fa)
    except ValueError as exc:
        raise _Exit(EXIT_USAGE, str(exc)) from exc
    emit({"trials": len(trials), "eer": eer, "min_dcf": dcf, "p_target": args.p_target,
          "c_miss": args.c_miss, "c_fa": args.c_fa}, args.format)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("kv", "json"), default="kv",
                        help="key=value lines (default) or a JSON block")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="csrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common], help="build and initialize a Rep-TDNN")
    p.add_argument("--config", help="JSON config file (default: built-in defaults)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("transform", parents=[common], help="apply CS-Rep")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stop-after", choices=("1", "2", "3", "full"), default="full")
    p.add_argument("--self-check", action="store_true")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("verify", parents=[common], help="compare two models on random inputs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="measure frames per second")
    p.add_argument("model")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", parents=[common], help="count parameters and FLOPs")
    p.add_argument("model")
    p.add_argument("--frames", type=int, default=300)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("eer", parents=[common], help="EER and minDCF from a score file")
    p.add_argument("scores")
    p.add_argument("--p-target", type=float, default=0.001)
    p.add_argument("--c-miss", type=float, default=1.0)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.set_defaults(func=cmd_eer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _Exit as exc:
        print(f"csrep {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
