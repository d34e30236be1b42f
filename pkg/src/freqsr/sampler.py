"""Layer-wise (BFS) autoregressive sampling of expression trees.

All trees of a batch grow in lockstep: at step ``t`` every unfinished tree
fills its ``t``-th BFS slot, so one forward pass per step covers the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .expr import BINARY, UNARY, ExprTree, Expression, TokenLibrary, dpe_encode, to_infix
from .model import ModelConfig, step_log_probs

__all__ = ["MaskRules", "SampleConfig", "Trajectory", "SlotContext", "apply_masks", "legal_tokens",
           "sample_batch", "MaskedToEmptyError", "dump_trajectories", "trajectory_from_tokens"]

INVERSE_PAIRS = (("log", "exp"), ("exp", "log"), ("square", "sqrt"), ("sqrt", "square"))


class MaskedToEmptyError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskRules:
    """Sampling constraints; each rule can be switched off on its own.

    root_not_constant: the root may not be ``c`` or ``1``.
    no_self_nesting: a unary token may not be its own direct child.
    no_inverse_pairs: log/exp and square/sqrt may not directly undo each other.
    no_constant_only_children: an operator's children may not all be ``c``/``1``.
    node_budget: close trees before they exceed the node budget.
    """

    root_not_constant: bool = True
    no_self_nesting: bool = True
    no_inverse_pairs: bool = True
    no_constant_only_children: bool = True
    node_budget: bool = True


@dataclass(frozen=True)
class SampleConfig:
    batch: int = 1000
    oversampling: float = 2.0
    max_nodes: int = 32
    rules: MaskRules = field(default_factory=MaskRules)

    def __post_init__(self):
        if self.batch < 1 or self.max_nodes < 1:
            raise ValueError("batch and max_nodes must be >= 1")
        if self.oversampling < 1.0:
            raise ValueError("oversampling must be >= 1")

    @property
    def n_grown(self) -> int:
        return int(np.ceil(self.oversampling * self.batch))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sampled tree with the masks and log-probabilities seen while sampling."""

    tokens: tuple[int, ...]
    log_probs: np.ndarray
    masks: np.ndarray  # (len, vocab) bool, True = legal
    library: TokenLibrary

    @property
    def tree(self) -> ExprTree:
        return ExprTree.from_tokens(self.tokens, self.library)

    def expression(self, constants=()) -> Expression:
        return Expression(self.tree, tuple(constants))

    @property
    def total_log_prob(self) -> float:
        return float(np.sum(self.log_probs))

    def __len__(self):
        return len(self.tokens)


@dataclass
class SlotContext:
    """What the mask rules look at for one slot."""

    parent: int | None  # token id, None for the root
    sibling: int | None  # left sibling token id when filling a right slot
    depth: int
    remaining: int  # nodes still allowed, counting this one
    open_slots: int  # unfilled slots, counting this one


def _rule_tables(library: TokenLibrary, rules: MaskRules):
    V = len(library)
    # row V stands for "no parent"
    blocked = np.zeros((V + 1, V), dtype=bool)
    syms = library.symbols
    if rules.no_self_nesting:
        for tok in library:
            if tok.kind == UNARY:
                blocked[tok.id, tok.id] = True
    if rules.no_inverse_pairs:
        for a, b in INVERSE_PAIRS:
            if a in syms and b in syms:
                blocked[library.index(a), library.index(b)] = True
    unary_parent = np.zeros(V + 1, dtype=bool)
    unary_parent[:V] = library.arities == 1
    return blocked, unary_parent


def legal_tokens(library: TokenLibrary, rules: MaskRules, parent, sibling, is_right, t, remaining, open_slots):
    """Vectorised mask computation; all context arguments are arrays of length n."""
    blocked, unary_parent = _rule_tables(library, rules)
    return _legal(library, rules, blocked, unary_parent, parent, sibling, is_right, t, remaining, open_slots)


def _legal(library, rules, blocked, unary_parent, parent, sibling, is_right, t, remaining, open_slots):
    V = len(library)
    n = len(parent)
    legal = np.ones((n, V), dtype=bool)
    parent_row = np.where(parent < 0, V, parent)
    legal &= ~blocked[parent_row]
    const = library.constant_kind
    if rules.root_not_constant:
        legal[np.asarray(t) == 0] &= ~const
    if rules.no_constant_only_children:
        sib_const = np.zeros(n, dtype=bool)
        has_sib = sibling >= 0
        sib_const[has_sib] = const[sibling[has_sib]]
        rows = unary_parent[parent_row] | (np.asarray(is_right) & sib_const)
        legal[rows] &= ~const
    if rules.node_budget:
        # every other open slot still needs at least one node
        spare = np.asarray(remaining) - np.asarray(open_slots)
        legal &= library.arities[None, :] <= spare[:, None]
    return legal


def apply_masks(logits: np.ndarray, context: SlotContext, library: TokenLibrary, rules: MaskRules = MaskRules()) -> np.ndarray:
    """Return ``logits`` with illegal tokens set to ``-inf``."""
    parent = np.array([-1 if context.parent is None else context.parent])
    sibling = np.array([-1 if context.sibling is None else context.sibling])
    is_right = sibling >= 0
    t = np.array([0 if context.parent is None else 1])
    legal = legal_tokens(library, rules, parent, sibling, is_right, t,
                         np.array([context.remaining]), np.array([context.open_slots]))[0]
    if not legal.any():
        raise MaskedToEmptyError("no legal token for slot")
    out = np.array(logits, dtype=float, copy=True)
    out[~legal] = -np.inf
    return out


class _Growth:
    """Bookkeeping for a batch of trees growing in BFS lockstep."""

    def __init__(self, n: int, library: TokenLibrary, max_nodes: int, embed_dim: int):
        self.n = n
        self.library = library
        self.nu = max_nodes
        self.D = embed_dim // 2
        cap = max_nodes + 2
        self.tokens = np.full((n, max_nodes), -1, dtype=np.int64)
        self.slot_parent = np.full((n, cap), -1, dtype=np.int64)  # parent node index
        self.slot_right = np.zeros((n, cap), dtype=bool)
        self.slot_depth = np.ones((n, cap), dtype=np.int64)
        self.slot_h = np.full((n, cap), 0.5)
        self.n_slots = np.ones(n, dtype=np.int64)
        self.length = np.zeros(n, dtype=np.int64)
        self.done = np.zeros(n, dtype=bool)
        self.pos_cache: dict[tuple[int, float], np.ndarray] = {}
        self.slot_pos = np.empty((n, cap, 2 * self.D))
        self.slot_pos[:, 0] = self.dpe(1, 0.5)

    def dpe(self, d: int, h: float) -> np.ndarray:
        key = (int(d), float(h))
        row = self.pos_cache.get(key)
        if row is None:
            row = self.pos_cache[key] = dpe_encode(d, h, self.D)
        return row

    def context(self, rows, t):
        parent_node = self.slot_parent[rows, t]
        parent_tok = np.where(parent_node >= 0, self.tokens[rows, np.maximum(parent_node, 0)], -1)
        is_right = self.slot_right[rows, t]
        sib = np.where(is_right, self.tokens[rows, max(t - 1, 0)], -1)
        remaining = np.full(len(rows), self.nu - t)
        open_slots = self.n_slots[rows] - t
        return parent_tok, sib, is_right, remaining, open_slots

    def positions(self, rows, t) -> np.ndarray:
        return self.slot_pos[rows, : t + 1]

    def place(self, rows, t, chosen):
        self.tokens[rows, t] = chosen
        arity = self.library.arities[chosen]
        for i, a in zip(rows, arity):
            k = self.n_slots[i]
            d = self.slot_depth[i, t] + 1
            step = 2.0 ** -int(d)
            h = self.slot_h[i, t]
            if a >= 1:
                self.slot_parent[i, k], self.slot_right[i, k] = t, False
                self.slot_depth[i, k], self.slot_h[i, k] = d, h - step
                self.slot_pos[i, k] = self.dpe(d, h - step)
                k += 1
            if a == 2:
                self.slot_parent[i, k], self.slot_right[i, k] = t, True
                self.slot_depth[i, k], self.slot_h[i, k] = d, h + step
                self.slot_pos[i, k] = self.dpe(d, h + step)
                k += 1
            self.n_slots[i] = k
        self.length[rows] = t + 1
        self.done[rows] = self.n_slots[rows] == t + 1


def sample_batch(theta, model_config: ModelConfig, library: TokenLibrary, config: SampleConfig, seed) -> list[Trajectory]:
    """Grow ``ceil(oversampling * batch)`` trees and keep the first ``batch`` unique ones.

    Duplicates fill the batch only when there are not enough unique trees.
    Tree ``i`` draws its tokens from row ``i`` of a Philox uniform stream, so
    results do not depend on how the batch is split up.
    """
    nu = config.max_nodes
    if nu > model_config.max_nodes:
        raise ValueError("sampling budget exceeds the model's node budget")
    n = config.n_grown
    V = len(library)
    rng = np.random.Generator(np.random.Philox(key=_seed_key(seed)))
    uniforms = rng.random((n, nu))
    grow = _Growth(n, library, nu, model_config.embed_dim)
    blocked, unary_parent = _rule_tables(library, config.rules)
    step_lp = np.zeros((n, nu))
    step_masks = np.zeros((n, nu, V), dtype=bool)
    theta_t = torch.from_numpy(np.ascontiguousarray(theta, dtype=np.float64))
    for t in range(nu):
        rows = np.flatnonzero(~grow.done)
        if rows.size == 0:
            break
        parent, sib, is_right, remaining, open_slots = grow.context(rows, t)
        legal = _legal(library, config.rules, blocked, unary_parent, parent, sib, is_right,
                       np.full(rows.size, t), remaining, open_slots)
        empty = ~legal.any(axis=1)
        if empty.any():
            raise MaskedToEmptyError(f"tree {rows[empty][0]}: no legal token for BFS slot {t}")
        with torch.no_grad():
            lp = step_log_probs(theta_t, model_config, grow.tokens[rows, :t], grow.positions(rows, t), legal).numpy()
        probs = np.exp(lp)
        cdf = np.cumsum(probs, axis=1)
        target = uniforms[rows, t] * cdf[:, -1]
        chosen = (cdf <= target[:, None]).sum(axis=1)
        # guard against landing on a zero-probability tail
        last_legal = V - 1 - np.argmax(legal[:, ::-1], axis=1)
        chosen = np.minimum(chosen, last_legal)
        while True:
            bad = ~legal[np.arange(rows.size), chosen]
            if not bad.any():
                break
            chosen[bad] += 1
        step_lp[rows, t] = lp[np.arange(rows.size), chosen]
        step_masks[rows, t] = legal
        grow.place(rows, t, chosen)
    if not grow.done.all():
        raise RuntimeError("node budget reached with open slots; enable the node_budget rule")
    trajectories = []
    for i in range(n):
        L = int(grow.length[i])
        trajectories.append(Trajectory(tuple(int(x) for x in grow.tokens[i, :L]), step_lp[i, :L].copy(),
                                       step_masks[i, :L].copy(), library))
    return _first_unique(trajectories, config.batch)


def _seed_key(seed) -> int:
    if isinstance(seed, (tuple, list)):
        key = 0
        for s in seed:
            key = (key * 1_000_003 + int(s)) % (1 << 63)
        return key
    return int(seed)


def _first_unique(trajectories: list[Trajectory], batch: int) -> list[Trajectory]:
    seen = set()
    unique, dupes = [], []
    for tr in trajectories:
        if tr.tokens in seen:
            dupes.append(tr)
        else:
            seen.add(tr.tokens)
            unique.append(tr)
    out = unique[:batch]
    if len(out) < batch:
        out += dupes[: batch - len(out)]
    return out


def trajectory_from_tokens(tokens, theta, model_config: ModelConfig, library: TokenLibrary,
                           rules: MaskRules = MaskRules(), max_nodes: int | None = None) -> Trajectory:
    """Score a given token sequence as if it had been sampled."""
    from .policy import pack, score

    nu = max_nodes or model_config.max_nodes
    tree = ExprTree.from_tokens(tokens, library)
    if not tree.complete:
        raise ValueError("token sequence does not form a complete tree")
    grow = _Growth(1, library, nu, model_config.embed_dim)
    blocked, unary_parent = _rule_tables(library, rules)
    masks = np.zeros((len(tokens), len(library)), dtype=bool)
    for t, tok in enumerate(tokens):
        parent, sib, is_right, remaining, open_slots = grow.context(np.array([0]), t)
        masks[t] = _legal(library, rules, blocked, unary_parent, parent, sib, is_right,
                          np.array([t]), remaining, open_slots)[0]
        if not masks[t, tok]:
            raise ValueError(f"token {library[tok].symbol!r} is masked at slot {t}")
        grow.place(np.array([0]), t, np.array([tok]))
    draft = Trajectory(tuple(int(t) for t in tokens), np.zeros(len(tokens)), masks, library)
    lp = score(theta, model_config, pack([draft], model_config))[0]
    return Trajectory(draft.tokens, lp.detach().numpy().copy(), masks, library)


def dump_trajectories(trajectories, path) -> None:
    """One line per trajectory: infix text, tab, total log-probability."""
    with open(path, "w") as fh:
        for tr in trajectories:
            fh.write(f"{to_infix(tr.tree)}\t{tr.total_log_prob:.17g}\n")
