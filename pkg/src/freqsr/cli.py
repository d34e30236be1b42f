"""Command-line entry points: ``fit``, ``bench``, ``inspect`` and ``tail-lab``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bench import (
    DataError,
    add_noise,
    load_csv,
    precision_barrier_demo,
    r2_score,
    run_experiment,
    synthetic_tail_logs,
    tail_barrier_stats,
)
from .config import ConfigError, ENV_PREFIX, load_config
from .rewards import baseline_weights

EXIT_CONFIG = 2
EXIT_DATA = 3
TAIL_K = (0, 1, 3, 5, 10)

# flag name -> config key
FLAG_KEYS = {
    "epochs": "epochs",
    "batch": "batch",
    "alpha": "alpha",
    "time_limit_s": "time_limit_s",
    "threads": "threads",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (bench: run only this seed)")
    p.add_argument("--out", type=Path, default=Path("freqsr-out"), help="output directory")
    p.add_argument("--threads", type=int, help="worker processes / torch threads (default: logical cores)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--noise", type=float, help="noise level as a fraction of the target std")
    p.add_argument("--time-limit-s", type=float)


def _config(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "noise", None) is not None and args.command == "bench":
        overrides["noise_levels"] = (args.noise,)
    if args.command == "bench" and args.seed is not None:
        overrides["seeds"] = (args.seed,)
    return load_config(args.config, overrides)


def _threads(args, config) -> int:
    return args.threads or config.threads or os.cpu_count() or 1


def cmd_fit(args) -> int:
    import torch

    from .policy import train, write_log_csv
    from .expr import complexity, evaluate

    config = _config(args)
    args.seed = args.seed or 0
    data = load_csv(args.data).split(args.test_fraction, args.seed)
    if data.sigma_y == 0:
        raise DataError(f"{args.data}: training target is constant")
    data = add_noise(data, args.noise or 0.0, args.seed + 7919)
    torch.set_num_threads(_threads(args, config))
    library = config.library(data.n_vars)
    args.out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    result = train(data.X_train, data.y_train, library, config.policy_config(), args.seed,
                   config.model_config(len(library)), config.sample_config(), config.lm_config(),
                   checkpoint_every=config.checkpoint_every, checkpoint_dir=args.out,
                   keep_reward_logs=True)
    write_log_csv(result.log, args.out / "training_log.csv")
    with open(args.out / "reward_log.txt", "w") as fh:
        for rewards in result.reward_logs:
            fh.write(",".join(repr(float(r)) for r in rewards) + "\n")
    report = {"data": str(args.data), "seed": args.seed, "noise": args.noise or 0.0,
              "best_expression": None, "r2_train": None, "r2_test": None, "raw_complexity": None,
              "epochs_to_best": result.best_epoch, "epochs_run": result.epochs_run,
              "truncated": result.truncated, "wall_time_s": time.monotonic() - started}
    if result.best is None:
        print("no valid expression found")
    else:
        best = result.best
        with np.errstate(all="ignore"):
            r2_train = r2_score(data.y_train, evaluate(best, data.X_train))
            r2_test = r2_score(data.y_test, evaluate(best, data.X_test)) if data.test_idx.size >= 2 else None
        report.update(best_expression=str(best), r2_train=_finite(r2_train), r2_test=_finite(r2_test),
                      raw_complexity=complexity(best))
        print(best)
        print(f"R2 train {r2_train:.6g}" + (f"  test {r2_test:.6g}" if r2_test is not None else ""))
        print(f"complexity {complexity(best)}")
    (args.out / "fit_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _finite(v):
    return v if v is not None and np.isfinite(v) else None


def cmd_bench(args) -> int:
    config = _config(args)
    agg = run_experiment(config, args.out, threads=_threads(args, config))
    for row in agg:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    from .model import CHECKPOINT_MAGIC, load_checkpoint

    path = args.path
    try:
        head = path.open("rb").read(len(CHECKPOINT_MAGIC))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if head == CHECKPOINT_MAGIC:
        theta, model_config, meta = load_checkpoint(path)
        print(f"parameters: {theta.size}")
        print(f"model: {model_config}")
        print(f"meta: {json.dumps(meta, sort_keys=True)}")
        if args.sample:
            from .expr import TokenLibrary
            from .sampler import SampleConfig, sample_batch

            if "library" not in meta:
                raise DataError("checkpoint has no token library; cannot sample")
            library = TokenLibrary.from_symbols(meta["library"])
            cfg = SampleConfig(batch=args.sample, oversampling=1.0, max_nodes=model_config.max_nodes)
            for tr in sample_batch(theta, model_config, library, cfg, seed=args.seed):
                print(f"{tr.total_log_prob:10.4f}  {tr.expression()}")
        return 0
    try:
        record = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: neither a checkpoint nor a JSON report") from exc
    for key in sorted(record):
        print(f"{key}: {record[key]}")
    return 0


def _read_reward_log(path: Path) -> list[np.ndarray]:
    logs = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            logs.append(np.array([float(v) for v in line.split(",")]))
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric reward") from None
    return logs


def _write_table(path: Path, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "dominated_fraction"])
        for k, frac in table.rows():
            w.writerow([k, repr(frac)])
        w.writerow(["barrier", repr(table.barrier)])
        w.writerow(["epochs", table.n_epochs])


def cmd_tail_lab(args) -> int:
    config = _config(args)
    args.seed = args.seed or 0
    alpha = config.alpha
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "precision_barrier.csv", "w", newline="") as fh:
        rows = [precision_barrier_demo(args.demo_batch, alpha, dt) for dt in (np.float32, np.float64)]
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['precision']}: distinct mapped {row['distinct_mapped']}/{row['batch']}, "
              f"reward-difference weights all zero: {row['baseline_all_zero']}, "
              f"rank weights positive: {row['rank_positive']}")
    synthetic = tail_barrier_stats(synthetic_tail_logs(seed=args.seed), alpha, TAIL_K)
    _write_table(out / "synthetic_domination.csv", synthetic)
    print("synthetic logs: " + ", ".join(f"k={k}: {100 * f:.2f}%" for k, f in synthetic.rows()))
    for log_path in args.log:
        # the reward-difference weights are the mass each expression puts into the update
        recorded = [baseline_weights(r, alpha) for r in _read_reward_log(log_path)]
        table = tail_barrier_stats(recorded, alpha, TAIL_K)
        _write_table(out / f"{log_path.stem}_domination.csv", table)
        print(f"{log_path}: " + ", ".join(f"k={k}: {100 * f:.2f}%" for k, f in table.rows())
              + f", barrier {100 * table.barrier:.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqsr",
        description=f"Symbolic regression by a frequency-attention policy. "
                    f"Config keys may also be set through {ENV_PREFIX}<KEY> environment variables.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="search for an expression that fits a CSV file")
    p.add_argument("data", type=Path, help="numeric CSV, last column is the target")
    p.add_argument("--test-fraction", type=float, default=0.25)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="run problems x noise levels x seeds from a config")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarise a parameter checkpoint or a JSON report")
    p.add_argument("path", type=Path)
    p.add_argument("--sample", type=int, default=0, help="sample this many expressions from a checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("tail-lab", help="tail-barrier tables and the precision demonstration")
    p.add_argument("--log", type=Path, action="append", default=[],
                   help="recorded reward log, one comma-separated epoch per line (repeatable)")
    p.add_argument("--demo-batch", type=int, default=1000, help="batch size of the precision demonstration")
    _add_common(p)
    p.set_defaults(func=cmd_tail_lab)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
