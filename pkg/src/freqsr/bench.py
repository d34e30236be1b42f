"""Datasets, metrics, tail-barrier statistics and experiment runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .const_opt import LMConfig, fit_constants
from .expr import Expression, TokenLibrary, complexity, evaluate, numeric_equiv, parse_infix
from .rewards import baseline_weights, rank_map

__all__ = [
    "DataError",
    "Dataset",
    "Problem",
    "PROBLEMS",
    "load_csv",
    "make_dataset",
    "add_noise",
    "r2_score",
    "solution_check",
    "TailBarrierTable",
    "tail_barrier_stats",
    "synthetic_tail_logs",
    "precision_barrier_demo",
    "trial_record",
    "run_trial",
    "run_experiment",
    "aggregate_trials",
    "TRIAL_TIME_FIELDS",
]

log = logging.getLogger(__name__)

ACCURACY_R2 = 0.999
DOMINATION_SHARE = 0.8


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "data"
    train_idx: np.ndarray = field(default=None)
    test_idx: np.ndarray = field(default=None)
    truth: Expression | None = None
    domain: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        S = self.y.size
        if self.X.shape[0] != S:
            raise DataError("X and y have different numbers of rows")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise DataError("dataset contains non-finite values")
        if self.train_idx is None:
            self.train_idx = np.arange(S)
        if self.test_idx is None:
            self.test_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != S or np.unique(both).size != S:
            raise DataError("train/test split must be disjoint and cover every row")

    @property
    def n_vars(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self):
        return self.X[self.train_idx]

    @property
    def y_train(self):
        return self.y[self.train_idx]

    @property
    def X_test(self):
        return self.X[self.test_idx]

    @property
    def y_test(self):
        return self.y[self.test_idx]

    @property
    def sigma_y(self) -> float:
        """Population standard deviation of the training targets."""
        return float(np.std(self.y_train))

    def split(self, test_fraction: float, seed: int = 0) -> "Dataset":
        """A copy with a random train/test split."""
        S = self.y.size
        perm = np.random.default_rng(seed).permutation(S)
        n_test = int(round(test_fraction * S))
        return Dataset(self.X, self.y, self.name, np.sort(perm[n_test:]), np.sort(perm[:n_test]),
                       self.truth, self.domain)


# ---------------------------------------------------------------------------
# ingestion


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path) -> Dataset:
    """Numeric CSV, last column is the target; a header row is detected and skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = [(i, r) for i, r in enumerate(csv.reader(io.StringIO(text)), 1) if any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise DataError(f"{path}: need at least one input column and a target column")
    values = np.empty((len(rows), width))
    for k, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: line {lineno}: expected {width} columns, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric cell {cell.strip()!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: line {lineno}: non-finite cell {cell.strip()!r}")
            values[k, j] = v
    return Dataset(values[:, :-1], values[:, -1], name=path.stem)


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class Problem:
    name: str
    formula: str
    n_vars: int = 1
    domain: tuple[tuple[float, float], ...] = ((-1.0, 1.0),)

    def truth(self) -> Expression:
        lib = TokenLibrary.build(self.n_vars, ("+", "-", "*", "/", "^"),
                                 ("sin", "cos", "tan", "log", "exp", "sqrt", "square"))
        return parse_infix(self.formula, lib)


PROBLEMS = {
    p.name: p
    for p in [
        Problem("quadratic", "x1*x1 + x1"),
        Problem("sincos", "sin(x1) + cos(x1)"),
        Problem("linear", "2.5*x1 + 1"),
        Problem("nguyen1", "x1*x1*x1 + x1*x1 + x1"),
        Problem("nguyen2", "x1*x1*x1*x1 + x1*x1*x1 + x1*x1 + x1"),
        Problem("nguyen3", "x1^5 + x1^4 + x1^3 + x1^2 + x1"),
        Problem("nguyen5", "sin(x1*x1)*cos(x1) - 1"),
        Problem("nguyen7", "log(x1 + 1) + log(x1*x1 + 1)", domain=((0.0, 2.0),)),
        Problem("nguyen8", "sqrt(x1)", domain=((0.0, 4.0),)),
        Problem("nguyen9", "sin(x1) + sin(x2*x2)", n_vars=2, domain=((0.0, 1.0), (0.0, 1.0))),
        Problem("nguyen10", "2*sin(x1)*cos(x2)", n_vars=2, domain=((0.0, 1.0), (0.0, 1.0))),
    ]
}


def make_dataset(problem: Problem | str, n_train: int = 100, n_test: int = 100, seed: int = 0) -> Dataset:
    """Uniform samples of a named target on its domain; train rows come first."""
    if isinstance(problem, str):
        try:
            problem = PROBLEMS[problem]
        except KeyError:
            raise DataError(f"unknown problem {problem!r}") from None
    rng = np.random.default_rng(seed)
    lo, hi = np.array(problem.domain).T
    X = rng.uniform(lo, hi, size=(n_train + n_test, problem.n_vars))
    truth = problem.truth()
    y = evaluate(truth, X)
    return Dataset(X, y, problem.name, np.arange(n_train), np.arange(n_train, n_train + n_test),
                   truth, problem.domain)


def add_noise(data: Dataset, level: float, seed: int = 0) -> Dataset:
    """Gaussian noise with std ``level * sigma_y`` on the training targets only."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return data
    rng = np.random.default_rng(seed)
    y = data.y.copy()
    y[data.train_idx] += rng.normal(0.0, level * data.sigma_y, size=data.train_idx.size)
    return Dataset(data.X, y, data.name, data.train_idx, data.test_idx, data.truth, data.domain)


# ---------------------------------------------------------------------------
# metrics


def r2_score(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.size < 2:
        raise ValueError("r2_score needs at least two samples")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValueError("r2_score is undefined for a constant target")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / sst


def solution_check(candidate: Expression, truth: Expression, domain, n_fit: int = 256, seed: int = 0,
                   lm: LMConfig = LMConfig(), refit: bool = True) -> bool:
    """Refit the candidate's constants on noise-free truth samples, then test numeric equivalence.

    With ``refit=False`` the constants are taken as given.
    """
    if refit and candidate.tree.n_constants:
        from scipy.stats import qmc

        dom = np.asarray(domain, dtype=float).reshape(-1, 2)
        X = qmc.scale(qmc.Halton(d=len(dom), scramble=True, seed=seed + 1).random(n_fit), dom[:, 0], dom[:, 1])
        y = evaluate(truth, X)
        ok = np.isfinite(y)
        fit = fit_constants(candidate, X[ok], y[ok], lm, init=candidate.constants)
        if not fit.poisoned:
            candidate = candidate.with_constants(fit.constants)
    return numeric_equiv(candidate, truth, domain, seed=seed)


# ---------------------------------------------------------------------------
# tail-barrier statistics


@dataclass
class TailBarrierTable:
    k_list: tuple[int, ...]
    dominated: tuple[float, ...]  # fraction of epochs, one per k
    barrier: float  # fraction of epochs whose baseline weights are all zero
    n_epochs: int

    def rows(self):
        return list(zip(self.k_list, self.dominated))


def _dominated(sorted_desc: np.ndarray, k: int) -> bool:
    total = sorted_desc.sum()
    if total == 0:
        # no expression carries any weight: every k dominates trivially
        return True
    return bool(sorted_desc[:k].sum() > DOMINATION_SHARE * total)


def tail_barrier_stats(logs: Sequence[Sequence[float]], alpha: float, k_list: Sequence[int]) -> TailBarrierTable:
    """How often the top-``k`` mapped rewards hold over 80% of an epoch's mass.

    ``logs`` holds one array of non-negative mapped rewards per epoch (any
    order; non-finite entries count as zero mass). An epoch whose mass is
    zero counts as dominated for every ``k``, including ``k = 0``. The
    barrier column is the fraction of epochs whose reward-difference
    weights at level ``alpha`` are all zero.
    """
    k_list = tuple(int(k) for k in k_list)
    if any(k < 0 for k in k_list):
        raise ValueError("k must be >= 0")
    hits = np.zeros(len(k_list), dtype=np.int64)
    barrier = 0
    for rewards in logs:
        r = np.asarray(rewards, dtype=float)
        mass = np.where(np.isfinite(r), r, 0.0)
        if (mass < 0).any():
            raise ValueError("mapped rewards must be non-negative")
        mass = np.sort(mass)[::-1]
        for j, k in enumerate(k_list):
            hits[j] += _dominated(mass, k)
        if r.size and not baseline_weights(r, alpha).any():
            barrier += 1
    n = len(logs)
    frac = tuple(float(h / n) if n else 0.0 for h in hits)
    return TailBarrierTable(k_list, frac, barrier / n if n else 0.0, n)


def _jitter(r, rng):
    # +-1% keeps the planted shares on the right side of 80% and makes the
    # values distinct, so only the all-zero epochs are reward-difference barriers
    return r * rng.uniform(0.99, 1.01, size=r.size)


def synthetic_tail_logs(n_epochs: int = 10000, batch: int = 50,
                        plan: dict[int, int] | None = None, seed: int = 0) -> list[np.ndarray]:
    """Epoch logs with a planted number of epochs first dominated at each ``k``.

    ``plan`` maps ``k`` to an epoch count; ``k = 0`` plants all-zero epochs.
    The remaining epochs hold uniform rewards. The default plan gives
    0.74%, 1.51%, 2.39%, 3.16% and 6.29% dominated at k = 0, 1, 3, 5, 10
    over 10000 epochs.
    """
    plan = {0: 74, 1: 77, 3: 88, 5: 77, 10: 313} if plan is None else plan
    if sum(plan.values()) > n_epochs:
        raise ValueError("plan needs more epochs than n_epochs")
    rng = np.random.default_rng(seed)
    logs = []
    for k, count in plan.items():
        if k >= batch:
            raise ValueError("k must be smaller than the batch")
        for _ in range(count):
            if k == 0:
                logs.append(np.zeros(batch))
                continue
            # k leaders share 85% of the mass, so k - 1 of them stay below 80%
            r = np.full(batch, 0.15 / (batch - k))
            r[:k] = 0.85 / k
            logs.append(rng.permutation(_jitter(r, rng)))
    for _ in range(n_epochs - len(logs)):
        logs.append(_jitter(np.full(batch, rng.uniform(0.1, 1.0)), rng))
    order = rng.permutation(len(logs))
    return [logs[i] for i in order]


def precision_barrier_demo(batch: int = 1000, alpha: float = 5.0, dtype=np.float32) -> dict:
    """Distinct rewards ``1e9 + i * 1e-4`` pushed through ``1 / (1 + z)`` at ``dtype``.

    In single precision the mapped values coincide, so the reward-difference
    weights vanish; the rank weights of the raw rewards do not.
    """
    z = 1e9 + np.arange(batch) * 1e-4
    zt = z.astype(dtype)
    mapped = (dtype(1) / (dtype(1) + zt)).astype(np.float64)
    base = baseline_weights(mapped, alpha)
    ranked = rank_map(z, alpha)
    top = ranked[np.argsort(-z)][: math.ceil(alpha * batch / 100)]
    return {
        "precision": np.dtype(dtype).name,
        "batch": batch,
        "alpha": alpha,
        "distinct_rewards": int(np.unique(z).size),
        "distinct_mapped": int(np.unique(mapped).size),
        "baseline_all_zero": bool(not base.any()),
        "rank_positive": int((ranked > 0).sum()),
        "rank_strictly_decreasing": bool(np.all(np.diff(top) < 0)),
    }


# ---------------------------------------------------------------------------
# experiments

TRIAL_TIME_FIELDS = ("wall_time_s",)


def _finite_or_none(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def trial_record(data: Dataset, result, seed: int, noise: float, wall_time: float) -> dict:
    """JSON-ready summary of one training run."""
    best = result.best
    rec = {
        "problem": data.name,
        "seed": seed,
        "noise": noise,
        "best_expression": None,
        "reward": _finite_or_none(result.best_reward),
        "r2_train": None,
        "r2_test": None,
        "raw_complexity": None,
        "epochs_to_best": result.best_epoch,
        "epochs_run": result.epochs_run,
        "truncated": result.truncated,
        "solved": False,
        "accurate": False,
        "error": None,
        "wall_time_s": wall_time,
    }
    if best is None:
        return rec
    rec["best_expression"] = str(best)
    rec["raw_complexity"] = complexity(best)
    with np.errstate(all="ignore"):
        rec["r2_train"] = _finite_or_none(r2_score(data.y_train, evaluate(best, data.X_train)))
        if data.test_idx.size >= 2:
            rec["r2_test"] = _finite_or_none(r2_score(data.y_test, evaluate(best, data.X_test)))
    rec["accurate"] = rec["r2_test"] is not None and rec["r2_test"] > ACCURACY_R2
    if data.truth is not None and data.domain is not None:
        rec["solved"] = solution_check(best, data.truth, data.domain)
    return rec


def _curve_rows(result) -> list[dict]:
    return [{k: row[k] for k in ("epoch", "mean_reward", "std_reward", "best_reward")} for row in result.log]


def run_trial(config, problem: str, noise: float, seed: int) -> tuple[dict, list[dict]]:
    """Train on one problem, noise level and seed; returns the trial record and learning curve."""
    import torch

    from .policy import train

    torch.set_num_threads(1)
    started = time.monotonic()
    data = add_noise(make_dataset(problem, config.n_train, config.n_test, seed), noise, seed + 7919)
    library = config.library(data.n_vars)
    stop = None
    if config.stop_on_solution:
        def stop(expr):
            return solution_check(expr, data.truth, data.domain)
    result = train(data.X_train, data.y_train, library, config.policy_config(), seed,
                   config.model_config(len(library)), config.sample_config(), config.lm_config(), stop_when=stop)
    rec = trial_record(data, result, seed, noise, time.monotonic() - started)
    return rec, _curve_rows(result)


def _trial_name(problem: str, noise: float, seed: int) -> str:
    return f"{problem}__noise{noise:g}__seed{seed}"


def _safe_trial(args):
    config, problem, noise, seed = args
    try:
        return run_trial(config, problem, noise, seed)
    except Exception as exc:  # a crashed trial is recorded, the run goes on
        log.error("trial %s crashed: %s", _trial_name(problem, noise, seed), exc)
        rec = {"problem": problem, "seed": seed, "noise": noise, "best_expression": None, "reward": None,
               "r2_train": None, "r2_test": None, "raw_complexity": None, "epochs_to_best": None,
               "epochs_run": 0, "truncated": False, "solved": False, "accurate": False,
               "error": "".join(traceback.format_exception_only(type(exc), exc)).strip(), "wall_time_s": None}
        return rec, []


AGGREGATE_COLUMNS = ("noise", "n_trials", "n_failed", "solution_rate", "accuracy_rate", "mean_raw_complexity")


def aggregate_trials(records: Sequence[dict]) -> list[dict]:
    """Per-noise-level rates; an exact function of the trial records."""
    rows = []
    for noise in sorted({r["noise"] for r in records}):
        group = [r for r in records if r["noise"] == noise]
        ok = [r for r in group if r["error"] is None]
        ks = [r["raw_complexity"] for r in ok if r["raw_complexity"] is not None]
        rows.append({
            "noise": noise,
            "n_trials": len(group),
            "n_failed": len(group) - len(ok),
            "solution_rate": sum(r["solved"] for r in group) / len(group),
            "accuracy_rate": sum(r["accurate"] for r in group) / len(group),
            "mean_raw_complexity": sum(ks) / len(ks) if ks else None,
        })
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in columns})


def _problem_curves(curves: dict[tuple, list[dict]]) -> dict[tuple, list[dict]]:
    """Mean and std over seeds of the best-so-far reward; stopped runs hold their last value."""
    out = {}
    for (problem, noise) in sorted({(p, n) for p, n, _ in curves}):
        runs = [c for (p, n, _), c in sorted(curves.items()) if p == problem and n == noise and c]
        if not runs:
            out[(problem, noise)] = []
            continue
        T = max(len(c) for c in runs)
        mat = np.array([[c[min(t, len(c) - 1)]["best_reward"] for t in range(T)] for c in runs], dtype=float)
        with np.errstate(all="ignore"):
            rows = []
            for t in range(T):
                col = mat[:, t][np.isfinite(mat[:, t])]
                rows.append({"epoch": t, "mean_reward": float(col.mean()) if col.size else None,
                             "std_reward": float(col.std()) if col.size else None})
        out[(problem, noise)] = rows
    return out


def run_experiment(config, out_dir, threads: int | None = None) -> list[dict]:
    """Every problem x noise level x seed; writes trial JSON, aggregate and curve CSVs.

    Returns the aggregate rows. Trial files are written in a fixed order by
    this process only.
    """
    out = Path(out_dir)
    (out / "trials").mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    jobs = [(config, p, n, s) for p in config.problems for n in config.noise_levels for s in config.seeds]
    threads = threads or config.threads or os.cpu_count() or 1
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_safe_trial, jobs))
    else:
        outputs = [_safe_trial(job) for job in jobs]
    records, curves = [], {}
    for (_, p, n, s), (rec, curve) in zip(jobs, outputs):
        name = _trial_name(p, n, s)
        (out / "trials" / f"{name}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        _write_csv(out / "curves" / f"{name}.csv", ("epoch", "mean_reward", "std_reward", "best_reward"), curve)
        records.append(rec)
        curves[(p, n, s)] = curve
    for (p, n), rows in _problem_curves(curves).items():
        _write_csv(out / "curves" / f"{p}__noise{n:g}.csv", ("epoch", "mean_reward", "std_reward"), rows)
    agg = aggregate_trials(records)
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg)
    return agg
