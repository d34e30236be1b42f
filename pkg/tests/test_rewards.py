import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm, t as student_t

from freqsr.expr import complexity, parse_infix
from freqsr.rewards import (
    DegenerateTargetError,
    baseline_weights,
    bic_from_residuals,
    bic_reward,
    nrmse_reward,
    rank_map,
    risk_quantile,
    spl_reward,
    strictly_better_counts,
    tpsr_reward,
)

X2 = np.array([[0.0], [1.0]])


def test_nrmse_examples():
    assert nrmse_reward([1, 2, 3], [1, 2, 3], 1.0) == 1.0
    assert nrmse_reward([0, 2], [1, 1], 1.0) == 0.5
    assert nrmse_reward([0, 2], [0, 0], 1.0) == pytest.approx(1 / (1 + math.sqrt(2)), abs=1e-12)
    assert nrmse_reward([0, 2], [0, 0], 1.0) == pytest.approx(0.4142, abs=5e-5)
    with pytest.raises(DegenerateTargetError):
        nrmse_reward([1, 1], [1, 1], 0.0)


def test_bic_example(lib1):
    # exact fit of y = 2 x1 on two points, k = 1
    e = parse_infix("x1", lib1)
    got = bic_reward(e, np.array([[0.0], [2.0]]), [0.0, 2.0], 1.0)
    assert got == pytest.approx(-(math.log(2) + 2 * math.log(2 * math.pi)), abs=1e-12)
    assert got == pytest.approx(-4.3689, abs=5e-5)


def test_bic_against_independent_density(lib1):
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(40, 1))
    y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=40)
    sigma2 = float(np.var(y))
    e = parse_infix("x1 - x1*x1*x1/(1+1+1+1+1+1)", lib1)
    pred = X[:, 0] - X[:, 0] ** 3 / 6
    oracle = 2 * norm.logpdf(y, loc=pred, scale=math.sqrt(sigma2)).sum() - complexity(e) * math.log(40)
    assert bic_reward(e, X, y, sigma2) == pytest.approx(oracle, rel=1e-12)
    r = y - pred
    t_oracle = 2 * student_t.logpdf(r, df=4, scale=math.sqrt(sigma2)).sum() - 3 * math.log(40)
    assert bic_from_residuals(r, 3, sigma2, "student_t") == pytest.approx(t_oracle, rel=1e-12)


def test_bic_complexity_and_residual_monotonicity():
    r = np.array([0.3, -0.1, 0.2, 0.05])
    assert bic_from_residuals(r, 5, 1.0) - bic_from_residuals(r, 6, 1.0) == pytest.approx(math.log(4), abs=1e-12)
    assert bic_from_residuals(r / 2, 5, 1.0) > bic_from_residuals(r, 5, 1.0)
    with pytest.raises(ValueError):
        bic_from_residuals([0.1], 1, 1.0)
    with pytest.raises(DegenerateTargetError):
        bic_from_residuals(r, 1, 0.0)
    with pytest.raises(ValueError):
        bic_from_residuals(r, 1, 1.0, "cauchy")


def test_bic_poisoned(lib1):
    e = parse_infix("1/x1", lib1)
    assert bic_reward(e, X2, [0.0, 1.0], 1.0) == -math.inf


def test_spl_examples(lib1):
    y = np.array([0.0, 1.0])
    assert spl_reward(parse_infix("x1*x1*x1", lib1), X2, y, 0.99) == pytest.approx(0.9801, abs=1e-12)
    assert spl_reward(parse_infix("x1", lib1), X2, y, 0.99) == 1.0
    assert spl_reward(parse_infix("x1 + 1", lib1), X2, y, 1.0) == pytest.approx(0.5)
    assert spl_reward(parse_infix("1/x1", lib1), X2, y, 0.99) == 0.0
    with pytest.raises(ValueError):
        spl_reward(parse_infix("x1", lib1), X2, y, 0.0)


def test_tpsr_examples(lib1):
    y = np.array([0.0, 1.0])
    e = parse_infix("x1*x1", lib1)  # three tokens
    assert tpsr_reward(e, X2, y, 0.1, 3) == pytest.approx(1 + 0.1 / math.e, abs=1e-12)
    assert tpsr_reward(e, X2, y, 0.1, 3) == pytest.approx(1.0368, abs=5e-5)
    assert tpsr_reward(e, X2, y, 0.0, 3) == 1.0
    longer = parse_infix("x1*x1*x1", lib1)
    assert tpsr_reward(longer, X2, y, 0.1, 10) < tpsr_reward(parse_infix("x1", lib1), X2, y, 0.1, 10)
    assert tpsr_reward(parse_infix("1/x1", lib1), X2, y, 0.1, 3) == 0.0


def test_rank_map_examples():
    np.testing.assert_allclose(rank_map([5, 4, 3, 2, 1], 40, lam=1), [1.0, 0.5, 0, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(rank_map([7, 7, 7], 10, lam=0.2), [0.2, 0.2, 0.2])
    np.testing.assert_array_equal(rank_map([9, 9, 1, 1], 50, lam=1), [1, 1, 0, 0])
    assert rank_map([], 5).size == 0
    with pytest.raises(ValueError):
        rank_map([1, 2], 0)
    with pytest.raises(ValueError):
        rank_map([1, 2], 5, lam=0)


def test_rank_map_poisoned_entries_rank_last():
    w = rank_map([1.0, -np.inf, np.nan, 0.5], 50, lam=1)
    np.testing.assert_array_equal(w, [1.0, 0.0, 0.0, 0.5])


rewards_st = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(rewards_st, st.floats(0.5, 100))
def test_rank_map_properties(rewards, alpha):
    r = np.array(rewards)
    w = rank_map(r, alpha, lam=0.2)
    c = strictly_better_counts(r)
    assert np.all(w >= 0) and w.max() > 0
    np.testing.assert_array_equal(w > 0, c < alpha * r.size / 100)
    order = np.argsort(c, kind="stable")
    assert np.all(np.diff(w[order]) <= 0)
    # order only: strictly increasing transforms (exact in floating point) leave the weights alone
    _, level = np.unique(r, return_inverse=True)
    np.testing.assert_array_equal(rank_map(np.exp(0.01 * level) - 5, alpha, lam=0.2), w)
    np.testing.assert_array_equal(rank_map(4 * r, alpha, lam=0.2), w)
    brute = np.array([(r > v).sum() for v in r])
    np.testing.assert_array_equal(c, brute)


def test_float32_mapping_collapses_but_ranks_do_not():
    z = 1e9 + np.arange(100) * 1e-4
    mapped = (np.float32(1) / (np.float32(1) + z.astype(np.float32)))
    assert len({m.tobytes() for m in mapped}) == 1
    w = rank_map(-z, 5, lam=0.2)
    positive = w[w > 0]
    assert positive.size >= math.ceil(5 * 100 / 100)
    assert len(set(positive.tolist())) >= math.ceil(5 * 100 / 100)


def test_quantile_and_baseline_weights():
    r = np.arange(100.0)
    assert risk_quantile(r, 5) == 95.0
    w = baseline_weights(r, 5)
    np.testing.assert_array_equal(w[95:], [0, 1, 2, 3, 4])
    assert not w[:95].any()
    assert not baseline_weights(np.full(10, 3.0), 5).any()
    assert np.isfinite(baseline_weights([-np.inf, np.inf, 1.0], 50)).all()
