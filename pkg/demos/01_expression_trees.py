"""
Expression trees as token sequences
===================================

An expression is stored as its tokens in breadth-first order. Every node also
carries a depth and a horizontal position, which is what the model sees
instead of a plain sequence index.
"""

import numpy as np

from freqsr.expr import TokenLibrary, complexity, dpe_encode, evaluate, parse_infix, to_infix

lib = TokenLibrary.build(1, ("+", "-", "*", "/"), ("sin", "cos"))
print("library:", lib.symbols)

expr = parse_infix("c*x1*x1 + c*sin(x1) + c", lib)
tree = expr.tree
print("infix:     ", to_infix(expr))
print("BFS tokens:", tree.symbols())

# root at depth 1, horizontal 1/2; children move left or right by 2**-depth
for sym, d, h in zip(tree.symbols(), tree.depth, tree.horizontal):
    print(f"  {sym:>4}  depth={d}  h={h:.4f}")

# constants are numbered in BFS order, so the lone c comes first
fitted = expr.with_constants([1.0, 0.5, 2.0])
print("with constants:", fitted)
print("raw complexity:", complexity(fitted))

X = np.linspace(-1, 1, 5)[:, None]
print("values:", np.round(evaluate(fitted, X), 4))

# the encoding fed to the model, first node, 4 channels per coordinate
print("DPE of the root:", np.round(dpe_encode(tree.depth[0], tree.horizontal[0], 4), 4))
