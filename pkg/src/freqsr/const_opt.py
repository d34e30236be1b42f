"""Levenberg-Marquardt fitting of constant-token values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Expression, evaluate_tokens

__all__ = ["LMConfig", "FitResult", "fit_constants"]


@dataclass(frozen=True)
class LMConfig:
    max_iter: int = 50
    damping: float = 1e-3
    damping_up: float = 2.0
    damping_down: float = 3.0
    ftol: float = 1e-15
    xtol: float = 1e-13
    init_value: float = 1.0

    def __post_init__(self):
        for name in ("max_iter", "damping", "damping_up", "damping_down", "ftol", "xtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitResult:
    constants: tuple[float, ...]
    sse: float
    iterations: int
    poisoned: bool

    def __iter__(self):
        # allows ``constants, sse = fit_constants(...)``
        return iter((self.constants, self.sse))


def _sse(pred, y):
    r = y - pred
    return float(np.dot(r, r))


def fit_constants(expr: Expression, X, y, config: LMConfig = LMConfig(), init=None) -> FitResult:
    """Least-squares constants for ``expr`` by damped Gauss-Newton steps.

    The Jacobian comes from central differences with step
    ``1e-6 * (1 + |c|)``; every perturbed point is evaluated in one batched
    pass. The damping term is Marquardt's ``mu * diag(J^T J)``: it is
    multiplied by ``damping_up`` after a rejected step and divided by
    ``damping_down`` after an accepted one. Trial points that evaluate to
    non-finite values count as rejected steps.
    """
    # wild candidates overflow all the time; those steps are simply rejected
    with np.errstate(all="ignore"):
        return _fit(expr, X, y, config, init)


def _fit(expr: Expression, X, y, config: LMConfig, init) -> FitResult:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    tree = expr.tree
    p = tree.n_constants
    if p == 0:
        pred = evaluate_tokens(tree, X, np.zeros(0))
        ok = np.isfinite(pred).all()
        return FitResult((), _sse(pred, y) if ok else float("inf"), 0, not ok)

    if init is None:
        c = np.full(p, config.init_value)
    else:
        c = np.asarray(init, dtype=float).copy()
    pred = evaluate_tokens(tree, X, c)
    if not np.isfinite(pred).all():
        return FitResult(tuple(c), float("inf"), 0, True)
    sse = _sse(pred, y)
    mu = config.damping
    eye = np.eye(p)
    it = 0
    while it < config.max_iter and sse > 0.0:
        it += 1
        h = 1e-6 * (1.0 + np.abs(c))
        probes = np.repeat(c[None, :], 2 * p, axis=0)
        probes[np.arange(p), np.arange(p)] += h
        probes[p + np.arange(p), np.arange(p)] -= h
        vals = evaluate_tokens(tree, X, probes)
        J = ((vals[:p] - vals[p:]) / (2 * h[:, None])).T
        if not np.isfinite(J).all():
            break
        r = y - pred
        JtJ = J.T @ J
        g = J.T @ r
        diag = np.diag(JtJ).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while it <= config.max_iter:
            try:
                step = np.linalg.solve(JtJ + mu * np.diag(diag) + 1e-300 * eye, g)
            except np.linalg.LinAlgError:
                step = np.full(p, np.nan)
            trial = c + step
            if np.isfinite(step).all():
                trial_pred = evaluate_tokens(tree, X, trial)
                if np.isfinite(trial_pred).all():
                    trial_sse = _sse(trial_pred, y)
                    if trial_sse <= sse:
                        accepted = True
                        break
            mu *= config.damping_up
            it += 1
        if not accepted:
            break
        mu /= config.damping_down
        small_step = np.all(np.abs(step) <= config.xtol * (np.abs(c) + config.xtol))
        small_gain = sse - trial_sse <= config.ftol * sse
        c, pred, sse = trial, trial_pred, trial_sse
        if small_step or small_gain:
            break
    return FitResult(tuple(float(v) for v in c), sse, it, False)
