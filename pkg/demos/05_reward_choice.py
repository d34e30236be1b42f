"""
What the reward prefers
=======================

The BIC reward trades fit against size with a fixed variance, the variance of
the training targets. That variance is large compared with a clean fit, so
for small datasets a shorter, slightly wrong formula can outscore the exact
one. The normalised error reward has no size term at all.
"""

import numpy as np

from freqsr.bench import make_dataset
from freqsr.const_opt import fit_constants
from freqsr.expr import complexity, evaluate, parse_infix
from freqsr.rewards import bic_reward, nrmse_reward

data = make_dataset("sincos", n_train=100, seed=0)
X, y = data.X_train, data.y_train
sigma2 = float(np.var(y))
lib = data.truth.library

candidates = ["sin(x1) + cos(x1)", "cos(x1) + x1", "c*x1 + c", "c*x1*x1 + c*x1 + c", "x1"]
print(f"{'expression':<28} {'k':>3} {'BIC reward':>11} {'NRMSE reward':>13}")
for text in candidates:
    expr = parse_infix(text, lib)
    if expr.tree.n_constants:
        expr = expr.with_constants(fit_constants(expr, X, y).constants)
    bic = bic_reward(expr, X, y, sigma2)
    nr = nrmse_reward(y, evaluate(expr, X), float(np.std(y)))
    print(f"{text:<28} {complexity(expr):>3} {bic:11.3f} {nr:13.4f}")

# with the noise variance in place of the target variance the exact form wins
print("\nsame two forms scored with a much smaller variance (1e-4):")
for text in candidates[:2]:
    expr = parse_infix(text, lib)
    print(f"  {text:<20} {bic_reward(expr, X, y, 1e-4):12.2f}")
