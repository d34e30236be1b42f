"""Reward functions and the rank-based step mapping.

Every reward is oriented so that larger is better. The BIC reward is the
negated information criterion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import Expression, complexity, evaluate

__all__ = [
    "RewardRecord",
    "DegenerateTargetError",
    "nrmse_reward",
    "gaussian_loglik",
    "bic_reward",
    "bic_from_residuals",
    "spl_reward",
    "tpsr_reward",
    "rank_map",
    "strictly_better_counts",
    "risk_quantile",
    "baseline_weights",
    "REWARD_KINDS",
    "LIKELIHOODS",
]

REWARD_KINDS = ("bic", "nrmse", "spl", "tpsr")
LIKELIHOODS = ("gaussian", "student_t")


class DegenerateTargetError(ValueError):
    pass


@dataclass
class RewardRecord:
    index: int
    raw_reward: float
    rank: int  # count of strictly better rewards; 0 = best
    weight: float
    valid: bool
    constants: tuple[float, ...] = ()


def nrmse_reward(y, y_hat, sigma_y: float) -> float:
    """``1 / (1 + RMSE / sigma_y)``."""
    if not sigma_y > 0:
        raise DegenerateTargetError("sigma_y must be positive")
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    rmse = math.sqrt(np.mean((y - y_hat) ** 2))
    return 1.0 / (1.0 + rmse / sigma_y)


def gaussian_loglik(residuals, sigma2: float) -> float:
    r = np.asarray(residuals, dtype=float)
    return float(-0.5 * r.size * math.log(2 * math.pi * sigma2) - 0.5 * np.dot(r, r) / sigma2)


def _student_t_loglik(residuals, sigma2: float, nu: float = 4.0) -> float:
    from scipy.stats import t as student_t

    return float(np.sum(student_t.logpdf(np.asarray(residuals, dtype=float), df=nu, scale=math.sqrt(sigma2))))


def bic_from_residuals(residuals, k: int, sigma2: float, likelihood: str = "gaussian") -> float:
    """``2 log p - k log S``, i.e. minus the Bayesian information criterion."""
    S = np.asarray(residuals).size
    if S < 2:
        raise ValueError("need at least two samples")
    if not sigma2 > 0:
        raise DegenerateTargetError("sigma2 must be positive")
    if likelihood == "gaussian":
        ll = gaussian_loglik(residuals, sigma2)
    elif likelihood == "student_t":
        ll = _student_t_loglik(residuals, sigma2)
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    return 2.0 * ll - k * math.log(S)


def bic_reward(expr: Expression, X, y, sigma2: float, likelihood: str = "gaussian") -> float:
    """Negated BIC of ``expr`` on ``(X, y)``; ``-inf`` when evaluation is poisoned.

    ``sigma2`` is held fixed per dataset (the variance of the training
    targets), it is not re-estimated per expression.
    """
    y_hat = evaluate(expr, X)
    if not np.isfinite(y_hat).all():
        return -math.inf
    return bic_from_residuals(np.asarray(y, dtype=float) - y_hat, complexity(expr), sigma2, likelihood)


def count_multiplications(expr: Expression) -> int:
    lib = expr.library
    return sum(1 for t in expr.tree.tokens if lib[t].symbol == "*")


def spl_reward(expr: Expression, X, y, eta: float) -> float:
    """``eta**n / (1 + RMSE)`` with ``n`` the number of ``*`` tokens."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    y_hat = evaluate(expr, X)
    if not np.isfinite(y_hat).all():
        return 0.0
    rmse = math.sqrt(np.mean((np.asarray(y, dtype=float) - y_hat) ** 2))
    return eta ** count_multiplications(expr) / (1.0 + rmse)


def tpsr_reward(expr: Expression, X, y, lam: float, max_tokens: int) -> float:
    """``1 / (1 + NMSE) + lam * exp(-length / max_tokens)``.

    NMSE is the mean squared error divided by the variance of ``y``.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    y = np.asarray(y, dtype=float)
    y_hat = evaluate(expr, X)
    if not np.isfinite(y_hat).all():
        return 0.0
    var = np.var(y)
    if not var > 0:
        raise DegenerateTargetError("target has zero variance")
    nmse = np.mean((y - y_hat) ** 2) / var
    return 1.0 / (1.0 + nmse) + lam * math.exp(-len(expr.tree.tokens) / max_tokens)


def _clean_rewards(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float).copy()
    r[np.isnan(r)] = -np.inf
    return r


def strictly_better_counts(rewards) -> np.ndarray:
    """For each entry, how many entries are strictly larger."""
    r = _clean_rewards(rewards)
    ordered = np.sort(r)
    return (r.size - np.searchsorted(ordered, r, side="right")).astype(np.int64)


def rank_map(rewards, alpha: float, lam: float = 0.2, batch_size: int | None = None) -> np.ndarray:
    """Step-wise rank weights ``lam * max(0, 1 - c_i / (alpha * B / 100))``.

    ``c_i`` counts rewards strictly greater than reward ``i``, so tied rewards
    share a weight. ``batch_size`` overrides ``B`` when extra entries (replay
    buffer members) are ranked alongside a batch.
    """
    r = _clean_rewards(rewards)
    if r.size == 0:
        return np.zeros(0)
    if not 0 < alpha <= 100:
        raise ValueError("alpha must lie in (0, 100]")
    if not lam > 0:
        raise ValueError("lam must be positive")
    B = r.size if batch_size is None else batch_size
    top = alpha * B / 100.0
    c = strictly_better_counts(r)
    return lam * np.maximum(0.0, 1.0 - c / top)


def risk_quantile(rewards, alpha: float) -> float:
    """The ``1 - alpha/100`` quantile of the rewards (upper order statistic)."""
    r = _clean_rewards(rewards)
    return float(np.quantile(r, 1.0 - alpha / 100.0, method="higher"))


def baseline_weights(rewards, alpha: float) -> np.ndarray:
    """Reward-difference weights ``(R - R_alpha) * 1[R >= R_alpha]``.

    Infinite differences (poisoned rewards, or a poisoned quantile) are
    zeroed so that the weights stay finite.
    """
    r = _clean_rewards(rewards)
    q = risk_quantile(r, alpha)
    with np.errstate(invalid="ignore"):
        w = np.where(r >= q, r - q, 0.0)
    w[~np.isfinite(w)] = 0.0
    return w
