"""
Recovering a formula from data
==============================

A small run on ``y = x1*x1 + x1``. The model here is shrunk so the demo
finishes in seconds on one core; the defaults are much larger.
"""

import numpy as np

from freqsr.bench import make_dataset, r2_score, solution_check
from freqsr.config import load_config
from freqsr.expr import evaluate
from freqsr.policy import train

cfg = load_config(overrides=dict(batch=128, max_nodes=16, epochs=40, embed_dim=6, ff_dim=32,
                                 binary=("+", "-", "*"), unary=("sin", "cos")), environ={})
data = make_dataset("quadratic", n_train=100, n_test=100, seed=0)
lib = cfg.library(data.n_vars)


def solved(expr):
    return solution_check(expr, data.truth, data.domain)


result = train(data.X_train, data.y_train, lib, cfg.policy_config(), 0, cfg.model_config(len(lib)),
               cfg.sample_config(), cfg.lm_config(), stop_when=solved)

for row in result.log[:: max(1, len(result.log) // 8)]:
    print(f"epoch {row['epoch']:>3}  best {row['best_reward']:9.3f}  {row['best_expr']}")

best = result.best
print("\nbest expression:", best, "found at epoch", result.best_epoch)
print("test R2:", round(r2_score(data.y_test, evaluate(best, data.X_test)), 6))
print("matches the target:", solved(best))
print("parameters:", np.asarray(result.theta).size)
