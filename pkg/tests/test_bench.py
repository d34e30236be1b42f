import csv
import json

import numpy as np
import pytest

from freqsr.bench import (
    PROBLEMS,
    DataError,
    Dataset,
    add_noise,
    load_csv,
    make_dataset,
    precision_barrier_demo,
    r2_score,
    run_experiment,
    solution_check,
    synthetic_tail_logs,
    tail_barrier_stats,
)
from freqsr.config import load_config
from freqsr.expr import Expression, TokenLibrary, parse_infix

from conftest import random_tree


def _write(path, text):
    path.write_text(text)
    return path


def test_load_csv_shapes(tmp_path):
    rows = "\n".join(f"{i},{2 * i},{3 * i}" for i in range(10))
    d = load_csv(_write(tmp_path / "a.csv", rows + "\n"))
    assert d.n_vars == 2 and d.y.size == 10
    d = load_csv(_write(tmp_path / "b.csv", "x1,x2,y\n" + rows))
    assert d.y.size == 10 and d.y[3] == 9.0


@pytest.mark.parametrize("body,line", [
    ("x,y\n1,2\n3,nan\n", 3),
    ("1,2\n3\n", 2),
    ("1,2\n3,abc\n", 2),
    ("1,2\n\n3,inf\n", 3),
])
def test_load_csv_errors_name_the_line(tmp_path, body, line):
    with pytest.raises(DataError, match=f"line {line}"):
        load_csv(_write(tmp_path / "bad.csv", body))


def test_load_csv_missing_or_empty(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(DataError):
        load_csv(_write(tmp_path / "h.csv", "x,y\n"))


def test_dataset_split_invariants():
    X = np.arange(20.0)[:, None]
    d = Dataset(X, X[:, 0] * 2).split(0.25, seed=3)
    assert d.test_idx.size == 5 and d.train_idx.size == 15
    assert sorted(np.concatenate([d.train_idx, d.test_idx]).tolist()) == list(range(20))
    with pytest.raises(DataError):
        Dataset(X, X[:, 0], train_idx=np.arange(10), test_idx=np.arange(5, 20))
    with pytest.raises(DataError):
        Dataset(X, np.full(20, np.nan))


def test_add_noise_scale_and_isolation():
    rng = np.random.default_rng(0)
    S = 10_000
    X = rng.uniform(size=(2 * S, 1))
    y = rng.normal(scale=2.0, size=2 * S)
    d = Dataset(X, y, train_idx=np.arange(S), test_idx=np.arange(S, 2 * S))
    noisy = add_noise(d, 0.1, seed=5)
    eps = noisy.y_train - d.y_train
    target = 0.1 * d.sigma_y
    # the sample std of S normals has standard error about target / sqrt(2 S)
    assert abs(eps.std() - target) < 3 * target / np.sqrt(2 * S)
    np.testing.assert_array_equal(noisy.y_test, d.y_test)
    assert add_noise(d, 0.0, seed=5) is d
    assert add_noise(d, 0.1, seed=5).y.tobytes() == noisy.y.tobytes()
    with pytest.raises(ValueError):
        add_noise(d, -0.1)


def test_r2_examples():
    assert r2_score([0, 1, 2], [0, 1, 2]) == 1.0
    assert r2_score([0, 1, 2], [1, 1, 1]) == 0.0
    assert r2_score([0, 1, 2], [0, 1, 1]) == 0.5
    with pytest.raises(ValueError):
        r2_score([1, 1], [1, 1])


def test_solution_check_examples():
    p = PROBLEMS["linear"]
    truth = p.truth()
    lib = truth.library
    assert solution_check(parse_infix("1 + x1*2.5", lib), truth, p.domain)
    assert solution_check(parse_infix("x1*c + 1", lib).with_constants([1.0]), truth, p.domain)
    assert not solution_check(parse_infix("2.5*x1 + 1.01", lib), truth, p.domain, refit=False)
    assert not solution_check(parse_infix("x1 + 1", lib), truth, p.domain)


def test_solution_check_reflexive_on_fuzz_corpus():
    lib = TokenLibrary.build(2, ("+", "-", "*"), ("sin", "cos", "exp"))
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        t = random_tree(rng, lib, 12)
        e = Expression(t, tuple(rng.uniform(0.5, 2, size=t.n_constants)))
        assert solution_check(e, e, [(-1, 1), (-1, 1)], refit=False)
        checked += 1
    assert checked == 200


def test_make_dataset_is_seeded():
    a, b = make_dataset("quadratic", 50, 20, seed=1), make_dataset("quadratic", 50, 20, seed=1)
    assert a.X.tobytes() == b.X.tobytes() and a.y_train.size == 50 and a.y_test.size == 20
    np.testing.assert_allclose(a.y, a.X[:, 0] ** 2 + a.X[:, 0])
    with pytest.raises(DataError):
        make_dataset("nguyen99")


def test_tail_barrier_examples():
    table = tail_barrier_stats([[10, 0, 0]], 5, [1])
    assert table.dominated == (1.0,)
    uniform = tail_barrier_stats([np.ones(50)], 5, [0, 1, 5, 39])
    assert uniform.dominated == (0.0, 0.0, 0.0, 0.0) and uniform.barrier == 1.0
    zero = tail_barrier_stats([np.zeros(4)], 5, [0, 2])
    assert zero.dominated == (1.0, 1.0)
    with pytest.raises(ValueError):
        tail_barrier_stats([[-1.0, 2.0]], 5, [1])


def test_synthetic_tail_logs_hit_planted_shares():
    table = tail_barrier_stats(synthetic_tail_logs(seed=0), 5, (0, 1, 3, 5, 10))
    assert [round(100 * f, 2) for f in table.dominated] == [0.74, 1.51, 2.39, 3.16, 6.29]
    assert round(100 * table.barrier, 2) == 0.74


def test_precision_barrier_demo():
    lo = precision_barrier_demo(1000, 5, np.float32)
    hi = precision_barrier_demo(1000, 5, np.float64)
    assert lo["distinct_mapped"] == 1 and lo["baseline_all_zero"] and lo["rank_positive"] == 50
    assert lo["rank_strictly_decreasing"]
    assert hi["distinct_mapped"] == 1000 and not hi["baseline_all_zero"]


def _tiny_config(**kw):
    base = dict(problems=("linear", "quadratic"), seeds=(0, 1), batch=24, max_nodes=10, epochs=2,
                embed_dim=4, ff_dim=16, n_train=30, n_test=20)
    base.update(kw)
    return load_config(overrides=base, environ={})


def test_run_experiment_empty(tmp_path):
    assert run_experiment(_tiny_config(problems=()), tmp_path / "o", threads=1) == []
    assert (tmp_path / "o" / "aggregate.csv").read_text().startswith("noise,")


def test_run_experiment_files_and_determinism(tmp_path):
    cfg = _tiny_config()
    agg = run_experiment(cfg, tmp_path / "a", threads=1)
    run_experiment(cfg, tmp_path / "b", threads=1)
    trials = sorted((tmp_path / "a" / "trials").glob("*.json"))
    assert len(trials) == 4
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "b" / "aggregate.csv").read_bytes()
    assert (tmp_path / "a" / "curves" / "linear__noise0.csv").exists()
    # aggregates can be rebuilt from the trial files alone
    recs = [json.loads(p.read_text()) for p in trials]
    with open(tmp_path / "a" / "aggregate.csv") as fh:
        row = next(csv.DictReader(fh))
    assert int(row["n_trials"]) == 4
    assert float(row["solution_rate"]) == sum(r["solved"] for r in recs) / 4
    assert float(row["accuracy_rate"]) == sum(r["accurate"] for r in recs) / 4
    ks = [r["raw_complexity"] for r in recs]
    assert float(row["mean_raw_complexity"]) == sum(ks) / len(ks)
    assert agg[0]["n_trials"] == 4
    for r in recs:
        for key, value in r.items():
            assert value is None or not isinstance(value, float) or np.isfinite(value), key


def test_trial_crash_is_recorded(tmp_path):
    cfg = _tiny_config(problems=("nguyen99",), seeds=(0,))
    agg = run_experiment(cfg, tmp_path, threads=1)
    rec = json.loads((tmp_path / "trials" / "nguyen99__noise0__seed0.json").read_text())
    assert "unknown problem" in rec["error"] and agg[0]["n_failed"] == 1
