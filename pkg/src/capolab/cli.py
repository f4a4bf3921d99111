"""``capolab`` command line: train, sweep, lab, compare, eval.

Exit statuses: 0 ok, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, format_kv
from .envs import NoiseModel
from .lab import ESTIMATORS, default_lab_env, mc_gradient_stats, variance_halving_check
from .policy import load_checkpoint, save_checkpoint
from .trainer import (
    ALGOS,
    DEFAULT_FRACTIONS,
    NumericalError,
    compare_algorithms,
    eval_policy,
    load_train_config,
    sweep_switch_points,
    train,
    write_metrics,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
HALVING_BAND = (0.48, 0.52)
BIAS_SE = 3.0


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_manifest(out: Path, cfg_items: dict, artifacts: Sequence[str], started: float) -> None:
    items = dict(cfg_items)
    items["artifacts"] = list(artifacts)
    items["duration_s"] = round(time.perf_counter() - started, 3)
    items["version"] = _version()
    (out / "manifest.txt").write_text(format_kv(items))


def _need_config(args) -> None:
    if args.config is None:
        raise UsageError(f"{args.command}: --config is required")


def _fractions(text: str) -> list[float]:
    try:
        fracs = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--fractions: cannot parse {text!r}") from None
    if not fracs:
        raise UsageError("--fractions: empty list")
    bad = [f for f in fracs if not 0.0 <= f <= 1.0]
    if bad:
        raise UsageError(f"--fractions: values outside [0, 1]: {bad}")
    return fracs


def cmd_train(args) -> int:
    _need_config(args)
    started = time.perf_counter()
    cfg = load_train_config(args.config, args.seed)
    result = train(cfg)
    write_metrics(result.metrics, args.out / "metrics.csv")
    save_checkpoint(result.params, args.out / "checkpoint.txt")
    _write_manifest(args.out, cfg.to_kv(), ["metrics.csv", "checkpoint.txt"], started)
    print(f"final_reward={result.final_reward:.6f} entropy={result.final_entropy:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    _need_config(args)
    started = time.perf_counter()
    fracs = _fractions(args.fractions)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = load_train_config(args.config, args.seed)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = sweep_switch_points(cfg, fracs, seeds, with_endpoints=args.with_endpoints, workers=args.workers)
    _write_csv(
        args.out / "sweep.csv",
        ["fraction", "seed", "final_reward", "mean_entropy"],
        [(r.fraction, r.seed, r.final_reward, r.mean_entropy) for r in rows],
    )
    by_frac: dict[float, list[float]] = {}
    for r in rows:
        by_frac.setdefault(r.fraction, []).append(r.final_reward)
    for f, vals in by_frac.items():
        print(f"fraction={f:g} median_final_reward={np.median(vals):.6f}")
    _write_manifest(args.out, cfg.to_kv(), ["sweep.csv"], started)
    return EXIT_OK


def cmd_lab(args) -> int:
    started = time.perf_counter()
    if not args.sigma > 0:
        raise UsageError("--sigma must be > 0 for the halving check")
    if args.n < 10**5:
        raise UsageError("--n must be >= 100000")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    ratio = variance_halving_check(args.sigma, args.n, rng)
    env = default_lab_env()
    params = env.init_params()
    noise = NoiseModel(args.sigma)
    stats = {e: mc_gradient_stats(env, params, e, noise, args.n, rng, workers=args.workers) for e in ESTIMATORS}
    _write_csv(
        args.out / "lab.csv",
        ["estimator", "sigma", "n", "bias_norm", "variance_trace", "mse", "ratio_halving"],
        [(e, args.sigma, s.n_samples, s.bias_norm, s.variance_trace, s.mse, ratio) for e, s in stats.items()],
    )
    halving_ok = HALVING_BAND[0] <= ratio <= HALVING_BAND[1]
    unbiased_ok = stats["phase2"].bias_norm <= BIAS_SE * stats["phase2"].standard_error
    grad_ratio = stats["phase1"].variance_trace / stats["phase2"].variance_trace
    print(f"{'PASS' if halving_ok else 'FAIL'} halving ratio={ratio:.4f} band={list(HALVING_BAND)}")
    print(
        f"{'PASS' if unbiased_ok else 'FAIL'} phase2 bias_norm={stats['phase2'].bias_norm:.3e} "
        f"<= {BIAS_SE:g} SE ({stats['phase2'].standard_error:.3e})"
    )
    print(f"gradient variance ratio phase1/phase2={grad_ratio:.4f}")
    _write_manifest(args.out, {"sigma": args.sigma, "n": args.n, "seed": seed}, ["lab.csv"], started)
    return EXIT_OK


def cmd_compare(args) -> int:
    _need_config(args)
    started = time.perf_counter()
    cfg = load_train_config(args.config, args.seed)
    algos = ALGOS if args.algos is None else [a.strip() for a in args.algos.split(",")]
    unknown = [a for a in algos if a not in ALGOS]
    if unknown:
        raise UsageError(f"unknown algo(s) {unknown}; choose from {list(ALGOS)}")
    curricula = ["none", "capo"] + (["static"] if args.curriculum == "static" else [])
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = compare_algorithms(cfg, curricula, seeds, algos=algos, workers=args.workers)
    _write_csv(
        args.out / "compare.csv",
        ["algo", "curriculum", "seed", "final_reward", "delta"],
        [(r.algo, r.curriculum, r.seed, r.final_reward, r.delta) for r in rows],
    )
    for r in rows:
        print(f"{r.algo:12s} {r.curriculum:7s} seed={r.seed} final={r.final_reward:.4f} delta={r.delta:+.4f}")
    _write_manifest(args.out, cfg.to_kv(), ["compare.csv"], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    _need_config(args)
    cfg = load_train_config(args.config, args.seed)
    params = load_checkpoint(args.checkpoint)
    score = eval_policy(params, cfg.env, args.episodes, np.random.default_rng(cfg.seed))
    print(f"greedy_reward={score:.6f} episodes={args.episodes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")

    p = argparse.ArgumentParser(prog="capolab", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", parents=[common], help="single training run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", parents=[common], help="switch-fraction sweep")
    sp.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS))
    sp.add_argument("--seeds", type=int, default=1, help="number of seeds, counting up from the base seed")
    sp.add_argument("--with-endpoints", action="store_true", help="also run fractions 0 and 1")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("lab", parents=[common], help="gradient-estimator Monte Carlo study")
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=10**6)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_lab)

    sp = sub.add_parser("compare", parents=[common], help="every algorithm with and without the curriculum")
    sp.add_argument("--curriculum", choices=["capo", "static"], default="capo",
                    help="'static' adds the difficulty-ordered baseline")
    sp.add_argument("--algos", help="comma-separated subset of algorithms")
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("eval", parents=[common], help="greedy evaluation of a checkpoint")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--episodes", type=int, default=1000)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
