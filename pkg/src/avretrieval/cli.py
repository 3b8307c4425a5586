"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

from .bench import run_bench
from .config import ConfigError, estimator_from_config, load_dataset_spec, load_run_config, read_kv
from .data_io import (CheckpointError, FormatError, generate_synthetic, load_bundles, load_checkpoint,
                      save_bundles, save_checkpoint)
from .estimator import AVRetriever, NumericalError
from .retrieval import format_report

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def _load_data(path):
    try:
        bundles = load_bundles(path)
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if not bundles:
        raise DataError(f"{path}: no bundles")
    return bundles


def cmd_train(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    est = load_run_config(args.config, **overrides)
    data = _load_data(args.data)
    try:
        est.fit(data)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(args.out, est.model_)
    return EXIT_OK


def cmd_eval(args) -> int:
    values = read_kv(args.config) if args.config else {}
    if args.alignment_mode:
        values["alignment_mode"] = args.alignment_mode
    template = estimator_from_config(values)
    try:
        model = load_checkpoint(args.ckpt)
    except CheckpointError as exc:
        raise DataError(f"{args.ckpt}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {args.ckpt}: {exc.strerror}") from exc
    params = {k: v for k, v in template.get_params().items()
              if k not in ("dim", "n_layers", "n_blocks", "n_queries", "n_heads", "hidden")}
    est = AVRetriever.from_model(model, **params)
    data = _load_data(args.data)
    try:
        t2v, v2t = est.evaluate(data, dsl=args.dsl, beta=args.beta)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    reports = {"t2v": (t2v,), "v2t": (v2t,), "both": (t2v, v2t)}[args.direction]
    sys.stdout.write(format_report(*reports))
    return EXIT_OK


def cmd_bench(args) -> int:
    est = load_run_config(args.config) if args.config else estimator_from_config()
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes must be positive")
    if args.reps < 5:
        raise ConfigError("--reps must be >= 5")
    seed = est.seed if args.seed is None else args.seed
    result = run_bench(est.model_dims(), sizes, reps=args.reps, n_frames=args.frames,
                       cfg=est.alignment_config, seed=seed, block=args.block)
    text = result.to_text()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = load_dataset_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    save_bundles(args.out, generate_synthetic(spec))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avretrieval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")

    p = sub.add_parser("train", help="train on a bundle file and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a bundle file with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="run config for alignment and gate settings")
    p.add_argument("--dsl", action="store_true", help="dual-softmax reweighting before ranking")
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--direction", choices=("both", "t2v", "v2t"), default="both")
    p.add_argument("--alignment-mode", choices=("global_local", "global_only", "local_only"))
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-query latency sweep over gallery sizes")
    p.add_argument("--config")
    p.add_argument("--sizes", default="16,32,64,128,256")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--block", type=int, default=None, help="gallery chunk for the precompute scorer")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic bundle file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


@contextmanager
def _log_to_stdout():
    logger = logging.getLogger("avretrieval")
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(message)s"))
    old_level = logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        logger.setLevel(old_level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _log_to_stdout(), threadpool_limits(max(1, args.threads)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
