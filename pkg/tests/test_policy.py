import math

import numpy as np
import pytest
import torch

from freqsr.expr import TokenLibrary, parse_infix
from freqsr.model import ModelConfig, init_params
from freqsr.policy import (
    AdamState,
    MaskReplayError,
    Objective,
    PolicyConfig,
    ReplayBuffer,
    Scored,
    UpdateBatch,
    adam_step,
    gradient,
    objective,
    pack,
    step_tables,
    train,
    write_log_csv,
)
from freqsr.rewards import baseline_weights, rank_map
from freqsr.sampler import SampleConfig, Trajectory, sample_batch

TINY_LIB = TokenLibrary.build(1, ("+", "*"), ("sin",), constant=True, one=True)
TINY = ModelConfig(len(TINY_LIB), embed_dim=4, ff_dim=8, max_nodes=10)


def _theta(seed=0, noise=0.3):
    rng = np.random.default_rng(seed)
    return init_params(TINY, seed) + noise * rng.normal(size=init_params(TINY, seed).size)


def _trajs(theta, n=12, seed=0):
    return sample_batch(theta, TINY, TINY_LIB, SampleConfig(batch=n, max_nodes=10), seed)


def _fd_check(spec, batch, theta, n_coords=64, h=1e-5):
    analytic = gradient(spec, batch, theta, TINY)
    rng = np.random.default_rng(1)
    coords = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    for i in coords:
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        with torch.no_grad():
            fd = -(float(objective(up, TINY, spec, batch)[0]) - float(objective(down, TINY, spec, batch)[0])) / (2 * h)
        a = analytic[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-5)
        assert rel < 1e-4, (i, a, fd)
    return analytic


@pytest.mark.parametrize("kind", ["baseline", "rank", "grpo"])
def test_gradient_matches_finite_differences(kind):
    theta = _theta(0)
    trajs = _trajs(theta)
    rewards = np.linspace(1.0, 2.0, len(trajs))
    weights = baseline_weights(rewards, 30) if kind == "baseline" else rank_map(rewards, 30, 0.2)
    old = theta + 0.01 * np.random.default_rng(2).normal(size=theta.size)
    batch = UpdateBatch.build(trajs, weights, 100 / (30 * len(trajs)), TINY, theta_old=old)
    g = _fd_check(Objective(kind), batch, theta)
    assert np.abs(g).max() > 0


def test_kl_and_entropy_gradients_match_finite_differences():
    theta = _theta(3)
    trajs = _trajs(theta, seed=4)
    ref = _theta(5)
    batch = UpdateBatch.build(trajs, np.zeros(len(trajs)), 1.0, TINY, theta_ref=ref)
    _fd_check(Objective("rank", beta=0.5), batch, theta)
    _fd_check(Objective("rank", entropy_coef=0.3), batch, theta)


def test_zero_weights_give_zero_gradient():
    theta = _theta(0)
    trajs = _trajs(theta)
    batch = UpdateBatch.build(trajs, baseline_weights(np.full(len(trajs), 3.0), 5), 1.0, TINY, theta_old=theta)
    for kind in ("baseline", "rank", "grpo"):
        assert not gradient(Objective(kind), batch, theta, TINY).any()


def test_gradient_linear_in_weights():
    theta = _theta(1)
    trajs = _trajs(theta, seed=1)
    w = rank_map(np.arange(len(trajs), dtype=float), 50, 0.2)
    g1 = gradient(Objective("rank"), UpdateBatch.build(trajs, w, 0.5, TINY), theta, TINY)
    g2 = gradient(Objective("rank"), UpdateBatch.build(trajs, 2 * w, 0.5, TINY), theta, TINY)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_single_expression_above_quantile():
    theta = _theta(2)
    trajs = _trajs(theta, seed=2)
    rewards = np.zeros(len(trajs))
    rewards[4] = 0.7
    w = baseline_weights(rewards, 10)
    assert np.flatnonzero(w).tolist() == [4]
    g = gradient(Objective("baseline"), UpdateBatch.build(trajs, w, 2.0, TINY), theta, TINY)
    alone = gradient(Objective("rank"), UpdateBatch.build([trajs[4]], [1.0], 1.0, TINY), theta, TINY)
    np.testing.assert_allclose(g, 2.0 * 0.7 * alone, rtol=1e-12, atol=1e-15)


def test_grpo_at_old_equals_rank_gradient():
    theta = _theta(4)
    trajs = _trajs(theta, seed=3)
    w = rank_map(np.arange(len(trajs), dtype=float), 40, 0.2)
    batch = UpdateBatch.build(trajs, w, 0.3, TINY, theta_old=theta)
    g_grpo, info = gradient(Objective("grpo"), batch, theta, TINY, with_info=True)
    g_rank = gradient(Objective("rank"), batch, theta, TINY)
    np.testing.assert_allclose(g_grpo, g_rank, rtol=1e-12, atol=1e-15)
    assert info["clip_fraction"] == 0.0
    # the rank-mapped gradient is not the zero vector
    assert np.abs(g_rank).max() > 0


def test_clipped_tokens_contribute_nothing():
    theta = _theta(5)
    trajs = _trajs(theta, seed=5)
    w = np.full(len(trajs), 0.2)
    batch = UpdateBatch.build(trajs, w, 1.0, TINY, theta_old=theta)
    # pretend every token is 1.5 times as likely as under theta_old
    batch.old_logp = [lp - math.log(1.5) for lp in batch.old_logp]
    g, info = gradient(Objective("grpo", epsilon=0.2), batch, theta, TINY, with_info=True)
    assert not g.any()
    assert info["clip_fraction"] == 1.0
    # on the unfavourable side the ratio stays in the min and keeps its gradient
    batch.old_logp = [lp + math.log(1.5) + math.log(2.0) for lp in batch.old_logp]
    assert np.abs(gradient(Objective("grpo", epsilon=0.2), batch, theta, TINY)).max() > 0


def test_kl_zero_at_reference_and_non_negative():
    theta = _theta(6)
    trajs = _trajs(theta, seed=6)
    batch = UpdateBatch.build(trajs, np.zeros(len(trajs)), 1.0, TINY, theta_ref=theta)
    _, info = objective(theta, TINY, Objective("rank", beta=0.01), batch)
    assert info["kl_mean"] == 0.0
    ref = _theta(7)
    packed = pack(trajs, TINY)
    with torch.no_grad():
        p_tabs = step_tables(torch.from_numpy(theta), TINY, packed)
        q_tabs = step_tables(torch.from_numpy(ref), TINY, packed)
    for g, p, q in zip(packed.groups, p_tabs, q_tabs):
        legal = torch.from_numpy(g.legal) if isinstance(g.legal, np.ndarray) else g.legal
        kl = torch.where(legal, p.exp() * (p - q), torch.zeros_like(p)).sum(-1)
        assert (kl >= -1e-15).all()


def test_mask_replay_error():
    theta = _theta(0)
    tr = _trajs(theta, n=1)[0]
    masks = tr.masks.copy()
    masks[0, tr.tokens[0]] = False
    bad = Trajectory(tr.tokens, tr.log_probs, masks, TINY_LIB)
    with pytest.raises(MaskReplayError):
        pack([bad], TINY)


def test_adam_examples():
    theta = np.array([1.0, -2.0])
    state = AdamState.zeros(2)
    assert np.array_equal(adam_step(theta, np.zeros(2), state, 1e-3), theta)
    state = AdamState.zeros(2)
    g = np.array([0.5, -3.0])
    adam_step(theta, g, state, 1e-3)
    np.testing.assert_array_equal(state.m / (1 - state.beta1), g)
    state = AdamState.zeros(2)
    th = theta.copy()
    for _ in range(2000):
        new = adam_step(th, g, state, 1e-3)
        step, th = new - th, new
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-6)
    assert np.all(np.sign(step) == -np.sign(g))


def test_adam_skips_non_finite():
    state = AdamState.zeros(2)
    theta = np.array([1.0, 2.0])
    out = adam_step(theta, np.array([np.nan, 1.0]), state, 1e-3)
    assert out is theta and state.skipped == 1 and state.step == 0


def test_replay_buffer_keeps_best_distinct():
    def item(tok, r):
        return Scored(Trajectory((tok,), np.zeros(1), np.ones((1, 6), bool), TINY_LIB), r, (), True)

    buf = ReplayBuffer(2)
    buf.update([item(3, 1.0), item(3, 1.0), item(4, 0.5)])
    assert [s.reward for s in buf] == [1.0, 0.5]
    buf.update([item(5, 0.1)])
    assert buf.min_reward == 0.5
    buf.update([item(5, 2.0)])
    assert [s.key for s in buf] == [(5,), (3,)]


def _small_train(seed=0, epochs=6, **kw):
    lib = TokenLibrary.build(1, ("+", "*"), ("sin",))
    X = np.linspace(-1, 1, 30)[:, None]
    y = X[:, 0] ** 2 + X[:, 0]
    cfg = PolicyConfig(epochs=epochs, **kw)
    sc = SampleConfig(batch=40, max_nodes=12)
    mc = ModelConfig(len(lib), embed_dim=4, ff_dim=16, max_nodes=12)
    return train(X, y, lib, cfg, seed, mc, sc)


def test_zero_epochs_is_empty():
    res = _small_train(epochs=0)
    assert res.empty and res.best_epoch is None and res.log == []


def test_training_log_is_monotone_and_deterministic(tmp_path):
    a = _small_train(seed=3, epochs=8, learning_rate=1e-3)
    b = _small_train(seed=3, epochs=8, learning_rate=1e-3)
    best = [row["best_reward"] for row in a.log]
    buf = [row["buffer_min"] for row in a.log]
    assert all(x <= y for x, y in zip(best, best[1:]))
    assert all(x <= y for x, y in zip(buf, buf[1:]))
    write_log_csv(a.log, tmp_path / "a.csv")
    write_log_csv(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.theta.tobytes() == b.theta.tobytes()


def test_time_limit_truncates():
    res = _small_train(epochs=100_000, time_limit_s=0.5)
    assert res.truncated and 0 < res.epochs_run < 100_000


@pytest.mark.parametrize("policy", ["baseline", "rank"])
def test_other_policies_run(policy):
    res = _small_train(epochs=3, policy=policy, beta=0.0)
    assert res.epochs_run == 3 and not res.empty


def test_smoke_recovers_identity():
    lib = TokenLibrary.build(1, ("+",), (), constant=False, one=False)
    X = np.linspace(-2, 2, 50)[:, None]
    y = X[:, 0].copy()
    target = parse_infix("x1", lib)
    hits = 0
    for seed in range(10):
        res = train(X, y, lib, PolicyConfig(epochs=5), seed, sample_config=SampleConfig(batch=64))
        hits += res.best is not None and res.best.tree.tokens == target.tree.tokens
    assert hits >= 9


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        PolicyConfig(steps_per_epoch=0)
    with pytest.raises(ValueError):
        Objective("ppo")
    assert PolicyConfig(policy="rank").objective().beta == 0.0
