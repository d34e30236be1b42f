import numpy as np
import pytest
import torch

from freqsr.expr import ExprTree, TokenLibrary

torch.set_num_threads(1)


def random_tokens(rng, library, max_nodes=15):
    """Grow a random complete tree in BFS order, closing once the budget is near."""
    arity = library.arities
    leaves = np.flatnonzero(arity == 0)
    tokens, open_slots = [], 1
    while open_slots:
        room = max_nodes - len(tokens) - open_slots
        pool = np.flatnonzero(arity <= room) if room > 0 else leaves
        t = int(rng.choice(pool))
        tokens.append(t)
        open_slots += arity[t] - 1
    return tokens


def random_tree(rng, library, max_nodes=15):
    return ExprTree.from_tokens(random_tokens(rng, library, max_nodes), library)


@pytest.fixture
def lib1():
    return TokenLibrary.build(1)


@pytest.fixture
def lib_full():
    return TokenLibrary.build(2, ("+", "-", "*", "/", "^"), ("sin", "cos", "tan", "log", "exp", "sqrt", "square"))


# one line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
