"""Policy objectives, optimizer and the training loop.

The objectives are written as scalar functions of the flat parameter vector
(to be maximised); :func:`gradient` differentiates the negated objective with
torch autograd. Everything runs in float64.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .const_opt import LMConfig, fit_constants
from .expr import Expression, ExprTree, TokenLibrary, complexity, evaluate_tokens
from .model import ModelConfig, init_params, layout_for, position_rows, save_checkpoint, step_log_probs
from .rewards import (
    baseline_weights,
    bic_from_residuals,
    rank_map,
    risk_quantile,
)
from .sampler import SampleConfig, Trajectory, sample_batch

__all__ = [
    "PolicyConfig",
    "Objective",
    "UpdateBatch",
    "Packed",
    "pack",
    "score",
    "log_prob",
    "objective",
    "gradient",
    "NonFiniteGradientError",
    "MaskReplayError",
    "AdamState",
    "adam_step",
    "ReplayBuffer",
    "RewardEvaluator",
    "TrainResult",
    "train",
    "write_log_csv",
]

log = logging.getLogger(__name__)

POLICIES = ("grpo", "rank", "baseline")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, component: str):
        super().__init__(f"non-finite gradient from the {component} term")
        self.component = component


class MaskReplayError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# replaying trajectories


@dataclass
class StepGroup:
    t: int
    rows: np.ndarray
    prefix: np.ndarray
    positions: np.ndarray
    legal: torch.Tensor
    chosen: torch.Tensor


@dataclass
class Packed:
    """Trajectories regrouped by BFS step so each step is one forward pass."""

    n: int
    lengths: np.ndarray
    groups: list[StepGroup]

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def pack(trajectories: Sequence[Trajectory], config: ModelConfig) -> Packed:
    n = len(trajectories)
    lengths = np.array([len(tr) for tr in trajectories], dtype=np.int64)
    if n == 0:
        return Packed(0, lengths, [])
    L = int(lengths.max())
    V = config.vocab_size
    tokens = np.zeros((n, L), dtype=np.int64)
    pos = np.zeros((n, L, config.embed_dim))
    masks = np.zeros((n, L, V), dtype=bool)
    for i, tr in enumerate(trajectories):
        tree = ExprTree.from_tokens(tr.tokens, tr.library)
        tokens[i, : len(tr)] = tr.tokens
        pos[i, : len(tr)] = position_rows(tree.depth, tree.horizontal, config.embed_dim)
        masks[i, : len(tr)] = tr.masks
        if not tr.masks[np.arange(len(tr)), list(tr.tokens)].all():
            raise MaskReplayError(f"trajectory {i}: a chosen token is masked out")
    groups = []
    for t in range(L):
        rows = np.flatnonzero(lengths > t)
        groups.append(
            StepGroup(
                t,
                rows,
                tokens[rows, :t],
                np.ascontiguousarray(pos[rows, : t + 1]),
                torch.from_numpy(masks[rows, t]),
                torch.from_numpy(tokens[rows, t]),
            )
        )
    return Packed(n, lengths, groups)


def step_tables(theta, config: ModelConfig, packed: Packed) -> list[torch.Tensor]:
    """Full masked log-probability tables, one ``(n_t, V)`` tensor per step."""
    return [step_log_probs(theta, config, g.prefix, g.positions, g.legal) for g in packed.groups]


def _chosen(tables, packed: Packed) -> list[torch.Tensor]:
    return [tab[torch.arange(len(g.rows)), g.chosen] for tab, g in zip(tables, packed.groups)]


def score(theta, config: ModelConfig, packed: Packed) -> list[torch.Tensor]:
    """Per-trajectory per-token log-probabilities."""
    theta = _tensor(theta)
    chosen = _chosen(step_tables(theta, config, packed), packed)
    per = [[] for _ in range(packed.n)]
    for g, lp in zip(packed.groups, chosen):
        for j, i in enumerate(g.rows):
            per[i].append(lp[j])
    return [torch.stack(p) if p else torch.zeros(0, dtype=torch.float64) for p in per]


def log_prob(trajectory: Trajectory, theta, config: ModelConfig) -> tuple[float, np.ndarray]:
    """``(total, per_token)`` log-probability of a trajectory under ``theta``."""
    with torch.no_grad():
        per = score(theta, config, pack([trajectory], config))[0].numpy()
    return float(per.sum()), per


def _tensor(theta) -> torch.Tensor:
    if isinstance(theta, torch.Tensor):
        return theta
    return torch.from_numpy(np.ascontiguousarray(theta, dtype=np.float64))


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class Objective:
    """Which policy objective to differentiate.

    kind: ``"baseline"`` (reward-difference weights), ``"rank"`` (rank-mapped
    weights times log-probability) or ``"grpo"`` (clipped ratio surrogate).
    The KL penalty and entropy bonus apply to any kind.
    """

    kind: str = "grpo"
    epsilon: float = 0.2
    beta: float = 0.0
    entropy_coef: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass
class UpdateBatch:
    """Trajectories with fixed per-trajectory weights and snapshot statistics."""

    packed: Packed
    weights: np.ndarray
    scale: float  # 100 / (alpha * B)
    old_logp: list[torch.Tensor] | None = None  # chosen-token log-probs under theta_old
    ref_tables: list[torch.Tensor] | None = None  # full tables under theta_ref

    @classmethod
    def build(cls, trajectories, weights, scale, config: ModelConfig, theta_old=None, theta_ref=None):
        packed = pack(trajectories, config)
        batch = cls(packed, np.asarray(weights, dtype=float), float(scale))
        with torch.no_grad():
            if theta_old is not None:
                batch.old_logp = _chosen(step_tables(_tensor(theta_old), config, packed), packed)
            if theta_ref is not None:
                batch.ref_tables = step_tables(_tensor(theta_ref), config, packed)
        return batch


def _safe_plogp(tab: torch.Tensor, legal: torch.Tensor, other: torch.Tensor | None = None) -> torch.Tensor:
    p = torch.exp(tab)
    diff = tab if other is None else tab - other
    return torch.where(legal, p * torch.where(legal, diff, torch.zeros_like(diff)), torch.zeros_like(p)).sum(-1)


def objective(theta, config: ModelConfig, spec: Objective, batch: UpdateBatch) -> tuple[torch.Tensor, dict]:
    """Scalar objective (to maximise) and its named components."""
    theta = _tensor(theta)
    packed = batch.packed
    tables = step_tables(theta, config, packed)
    chosen = _chosen(tables, packed)
    w_all = torch.from_numpy(batch.weights)
    surrogate = torch.zeros((), dtype=torch.float64)
    kl = torch.zeros((), dtype=torch.float64)
    entropy = torch.zeros((), dtype=torch.float64)
    clipped = 0
    for k, (g, lp, tab) in enumerate(zip(packed.groups, chosen, tables)):
        w = w_all[torch.from_numpy(g.rows)]
        if spec.kind == "grpo":
            if batch.old_logp is None:
                raise ValueError("grpo objective needs old log-probabilities")
            ratio = torch.exp(lp - batch.old_logp[k])
            clip = torch.clamp(ratio, 1.0 - spec.epsilon, 1.0 + spec.epsilon)
            surrogate = surrogate + (w * torch.minimum(ratio, clip)).sum()
            clipped += int(((ratio - 1.0).abs() > spec.epsilon).sum())
        else:
            surrogate = surrogate + (w * lp).sum()
        if spec.beta:
            if batch.ref_tables is None:
                raise ValueError("KL penalty needs reference tables")
            kl = kl + _safe_plogp(tab, g.legal, batch.ref_tables[k]).sum()
        if spec.entropy_coef:
            entropy = entropy - _safe_plogp(tab, g.legal).sum()
    n_tok = max(packed.n_tokens, 1)
    parts = {
        "surrogate": batch.scale * surrogate,
        "kl": -batch.scale * spec.beta * kl,
        "entropy": spec.entropy_coef * entropy / n_tok,
    }
    total = parts["surrogate"] + parts["kl"] + parts["entropy"]
    info = {
        "kl_mean": float(kl.detach()) / n_tok,
        "entropy_mean": float(entropy.detach()) / n_tok,
        "clip_fraction": clipped / n_tok,
        "parts": parts,
    }
    return total, info


def gradient(spec: Objective, batch: UpdateBatch, theta, config: ModelConfig, with_info: bool = False):
    """Gradient of the loss ``-objective`` with respect to the flat parameters."""
    th = torch.tensor(np.asarray(theta, dtype=np.float64), requires_grad=True)
    total, info = objective(th, config, spec, batch)
    (-total).backward()
    grad = th.grad.numpy().copy()
    if not np.isfinite(grad).all():
        for name, part in info["parts"].items():
            th2 = torch.tensor(np.asarray(theta, dtype=np.float64), requires_grad=True)
            _, info2 = objective(th2, config, spec, batch)
            p2 = info2["parts"][name]
            if p2.requires_grad:
                p2.backward()
                if not torch.isfinite(th2.grad).all():
                    raise NonFiniteGradientError(name)
        raise NonFiniteGradientError("objective")
    if with_info:
        info = {k: v for k, v in info.items() if k != "parts"} | {"loss": -float(total.detach())}
        return grad, info
    return grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-4) -> np.ndarray:
    """One bias-corrected Adam descent step; ``state`` is updated in place."""
    if not np.isfinite(grad).all():
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return theta
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# rewards for sampled trees


@dataclass
class Scored:
    trajectory: Trajectory
    reward: float
    constants: tuple[float, ...]
    valid: bool

    @property
    def key(self):
        return self.trajectory.tokens

    def expression(self) -> Expression:
        return self.trajectory.expression(self.constants)


class RewardEvaluator:
    """Fits constants and scores trees on fixed training data, memoised by tokens."""

    def __init__(self, X, y, library: TokenLibrary, kind: str = "bic", lm: LMConfig = LMConfig(),
                 spl_eta: float = 0.99, tpsr_lambda: float = 0.1, max_tokens: int = 32,
                 likelihood: str = "gaussian"):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        self.library = library
        self.kind = kind
        self.lm = lm
        self.spl_eta = spl_eta
        self.tpsr_lambda = tpsr_lambda
        self.max_tokens = max_tokens
        self.likelihood = likelihood
        self.sigma2 = float(np.var(self.y))
        if not self.sigma2 > 0:
            from .rewards import DegenerateTargetError

            raise DegenerateTargetError("training targets have zero variance")
        self.cache: dict[tuple[int, ...], tuple[float, tuple[float, ...], bool]] = {}

    def __call__(self, tokens: tuple[int, ...]) -> tuple[float, tuple[float, ...], bool]:
        hit = self.cache.get(tokens)
        if hit is not None:
            return hit
        tree = ExprTree.from_tokens(tokens, self.library)
        fit = fit_constants(Expression(tree), self.X, self.y, self.lm)
        if fit.poisoned or not math.isfinite(fit.sse):
            out = (-math.inf, fit.constants, False)
        else:
            out = (self._reward(tree, fit.constants, fit.sse), fit.constants, True)
        self.cache[tokens] = out
        return out

    def _reward(self, tree, constants, sse) -> float:
        S = self.y.size
        if self.kind == "bic":
            pred = evaluate_tokens(tree, self.X, np.asarray(constants))
            return bic_from_residuals(self.y - pred, complexity(tree), self.sigma2, self.likelihood)
        rmse = math.sqrt(sse / S)
        if self.kind == "nrmse":
            return 1.0 / (1.0 + rmse / math.sqrt(self.sigma2))
        if self.kind == "spl":
            n_mul = sum(1 for t in tree.tokens if self.library[t].symbol == "*")
            return self.spl_eta**n_mul / (1.0 + rmse)
        if self.kind == "tpsr":
            nmse = sse / S / self.sigma2
            return 1.0 / (1.0 + nmse) + self.tpsr_lambda * math.exp(-len(tree.tokens) / self.max_tokens)
        raise ValueError(f"unknown reward kind {self.kind!r}")


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """The best distinct trajectories seen so far, ordered best first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Scored] = []

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def min_reward(self) -> float:
        return min((s.reward for s in self.items), default=-math.inf)

    def update(self, candidates: Sequence[Scored]) -> None:
        pool: dict[tuple, Scored] = {}
        for s in list(self.items) + list(candidates):
            if s.key not in pool:
                pool[s.key] = s
        ranked = sorted(pool.values(), key=lambda s: -s.reward)
        self.items = ranked[: self.capacity]


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 5.0
    lam: float = 0.2
    epsilon: float = 0.2
    beta: float = 0.01
    entropy_coef: float = 0.005
    steps_per_epoch: int = 5
    epochs_per_ref: int = 5
    learning_rate: float = 1e-4
    epochs: int = 600
    policy: str = "grpo"
    reward: str = "bic"
    spl_eta: float = 0.99
    tpsr_lambda: float = 0.1
    likelihood: str = "gaussian"
    time_limit_s: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.steps_per_epoch < 1 or self.epochs_per_ref < 1:
            raise ValueError("steps_per_epoch and epochs_per_ref must be >= 1")
        if not 0 < self.alpha <= 100:
            raise ValueError("alpha must lie in (0, 100]")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.reward not in ("bic", "nrmse", "spl", "tpsr"):
            raise ValueError(f"unknown reward {self.reward!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def objective(self) -> Objective:
        beta = self.beta if self.policy == "grpo" else 0.0
        return Objective(self.policy, self.epsilon, beta, self.entropy_coef)


@dataclass
class TrainResult:
    best: Expression | None
    best_reward: float
    best_epoch: int | None
    log: list[dict]
    theta: np.ndarray
    truncated: bool = False
    epochs_run: int = 0
    reward_logs: list[np.ndarray] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.best is None


LOG_COLUMNS = ("epoch", "best_reward", "mean_reward", "std_reward", "r_alpha", "n_positive", "buffer_min", "entropy", "kl_mean",
               "clip_fraction", "n_unique", "best_expr")


def train(
    X,
    y,
    library: TokenLibrary,
    config: PolicyConfig = PolicyConfig(),
    seed: int = 0,
    model_config: ModelConfig | None = None,
    sample_config: SampleConfig | None = None,
    lm_config: LMConfig = LMConfig(),
    stop_when: Callable[[Expression], bool] | None = None,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
    keep_reward_logs: bool = False,
) -> TrainResult:
    """Sample, fit constants, score, rank, and take clipped policy steps.

    ``stop_when`` is an optional harness hook evaluated on the best-so-far
    expression after every epoch (for example a solution check); the
    training algorithm itself has no stopping rule besides ``epochs`` and
    ``time_limit_s``.
    """
    sample_config = sample_config or SampleConfig()
    model_config = model_config or ModelConfig(vocab_size=len(library), max_nodes=sample_config.max_nodes)
    if model_config.vocab_size != len(library):
        raise ValueError("model vocabulary does not match the token library")
    torch.manual_seed(seed)
    theta = init_params(model_config, seed)
    result = TrainResult(None, -math.inf, None, [], theta)
    if config.epochs == 0:
        return result

    B = sample_config.batch
    evaluator = RewardEvaluator(X, y, library, config.reward, lm_config, config.spl_eta, config.tpsr_lambda,
                                sample_config.max_nodes, config.likelihood)
    buffer = ReplayBuffer(max(1, math.ceil(config.alpha * B / 100)))
    adam = AdamState.zeros(theta.size)
    spec = config.objective()
    scale = 100.0 / (config.alpha * B)
    started = time.monotonic()
    best: Scored | None = None
    theta_ref = theta.copy()
    for epoch in range(config.epochs):
        if config.time_limit_s is not None and time.monotonic() - started > config.time_limit_s:
            result.truncated = True
            break
        if epoch % config.epochs_per_ref == 0:
            theta_ref = theta.copy()
        theta_old = theta.copy()

        trajs = sample_batch(theta, model_config, library, sample_config, seed=(seed, epoch))
        batch = []
        for tr in trajs:
            reward, consts, valid = evaluator(tr.tokens)
            batch.append(Scored(tr, reward, consts, valid))
        batch_keys = {s.key for s in batch}
        pool = batch + [s for s in buffer if s.key not in batch_keys]
        rewards = np.array([s.reward for s in pool])
        batch_rewards = rewards[: len(batch)]
        r_alpha = risk_quantile(batch_rewards, config.alpha)
        if spec.kind == "baseline":
            with np.errstate(invalid="ignore"):
                weights = np.where(rewards >= r_alpha, rewards - r_alpha, 0.0)
            weights[~np.isfinite(weights)] = 0.0
        else:
            weights = rank_map(rewards, config.alpha, config.lam, batch_size=B)
        chosen = np.flatnonzero(weights > 0)
        if chosen.size == 0:
            chosen = np.flatnonzero(rewards >= r_alpha)

        update = UpdateBatch.build([pool[i].trajectory for i in chosen], weights[chosen], scale, model_config,
                                   theta_old=theta_old if spec.kind == "grpo" else None,
                                   theta_ref=theta_ref if spec.beta else None)
        info = {}
        for _ in range(config.steps_per_epoch):
            grad, info = gradient(spec, update, theta, model_config, with_info=True)
            theta = adam_step(theta, grad, adam, config.learning_rate)

        top = pool[int(np.argmax(rewards))]
        if best is None or top.reward > best.reward:
            best = top
            result.best_epoch = epoch
        buffer.update(pool)
        finite = batch_rewards[np.isfinite(batch_rewards)]

        result.log.append({
            "epoch": epoch,
            "best_reward": best.reward,
            "mean_reward": float(finite.mean()) if finite.size else float("nan"),
            "std_reward": float(finite.std()) if finite.size else float("nan"),
            "r_alpha": r_alpha,
            "n_positive": int((weights > 0).sum()),
            "buffer_min": buffer.min_reward,
            "entropy": info.get("entropy_mean", float("nan")),
            "kl_mean": info.get("kl_mean", float("nan")),
            "clip_fraction": info.get("clip_fraction", float("nan")),
            "n_unique": len({tr.tokens for tr in trajs}),
            "best_expr": str(best.expression()),
        })
        if keep_reward_logs:
            result.reward_logs.append(batch_rewards.copy())
        result.epochs_run = epoch + 1
        if checkpoint_every and checkpoint_dir is not None and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(f"{checkpoint_dir}/epoch{epoch + 1:05d}.params", theta, model_config,
                            {"epoch": epoch + 1, "seed": seed, "library": library.symbols})
        if stop_when is not None and best.valid and stop_when(best.expression()):
            break

    result.theta = theta
    if best is not None and best.valid:
        result.best = best.expression()
        result.best_reward = best.reward
    elif best is not None:
        result.best_reward = best.reward
    return result


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in LOG_COLUMNS})
