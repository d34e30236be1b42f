"""Expression trees stored in breadth-first order.

A tree is fully determined by its token sequence in BFS order together with
the arity of each token, so most of the structure (parent links, child slots,
depth and horizontal position) is derived rather than stored by callers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Token",
    "TokenLibrary",
    "ExprTree",
    "Expression",
    "StructureError",
    "ParseError",
    "assign_positions",
    "dpe_encode",
    "evaluate",
    "is_poisoned",
    "complexity",
    "to_infix",
    "parse_infix",
    "numeric_equiv",
]

BINARY = "binary"
UNARY = "unary"
VARIABLE = "variable"
CONSTANT = "constant"
ONE = "literal_one"

_ARITY = {BINARY: 2, UNARY: 1, VARIABLE: 0, CONSTANT: 0, ONE: 0}

KNOWN_BINARY = ("+", "-", "*", "/", "^")
KNOWN_UNARY = ("sin", "cos", "tan", "log", "exp", "sqrt", "square")

# left-to-right binding strength used by the printer and the parser
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
_ATOM = 10


class StructureError(ValueError):
    """Raised for malformed trees (bad parent links, arity overflow, ...)."""


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class Token:
    id: int
    kind: str
    arity: int
    symbol: str

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise ValueError(f"unknown token kind {self.kind!r}")
        if _ARITY[self.kind] != self.arity:
            raise ValueError(f"token {self.symbol!r}: arity {self.arity} does not match kind {self.kind}")

    @property
    def is_constant_kind(self) -> bool:
        return self.kind in (CONSTANT, ONE)


class TokenLibrary:
    """Ordered vocabulary of operators, variables and constants.

    Token ids are dense (``0..len-1``). Variables are named ``x1 .. xV``.
    """

    def __init__(self, tokens: Sequence[Token]):
        tokens = tuple(tokens)
        for i, tok in enumerate(tokens):
            if tok.id != i:
                raise ValueError("token ids must be dense and ordered")
        symbols = [t.symbol for t in tokens]
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate token symbols")
        kinds = [t.kind for t in tokens]
        if VARIABLE not in kinds:
            raise ValueError("library needs at least one variable token")
        if kinds.count(CONSTANT) > 1:
            raise ValueError("the constant token may appear at most once")
        if kinds.count(ONE) > 1:
            raise ValueError("the literal one may appear at most once")
        self.tokens = tokens
        self._by_symbol = {t.symbol: t for t in tokens}
        self.arities = np.array([t.arity for t in tokens], dtype=np.int64)
        self.constant_kind = np.array([t.is_constant_kind for t in tokens], dtype=bool)
        self.variable_count = sum(1 for t in tokens if t.kind == VARIABLE)
        self.constant_id = next((t.id for t in tokens if t.kind == CONSTANT), None)
        self.one_id = next((t.id for t in tokens if t.kind == ONE), None)
        # column of X read by each variable token
        self.variable_column = {t.id: int(t.symbol[1:]) - 1 for t in tokens if t.kind == VARIABLE}

    @classmethod
    def build(
        cls,
        n_vars: int = 1,
        binary: Iterable[str] = ("+", "-", "*", "/"),
        unary: Iterable[str] = ("sin", "cos"),
        constant: bool = True,
        one: bool = True,
    ) -> "TokenLibrary":
        specs: list[tuple[str, str]] = []
        for sym in binary:
            if sym not in KNOWN_BINARY:
                raise ValueError(f"unsupported binary operator {sym!r}")
            specs.append((BINARY, sym))
        for sym in unary:
            if sym not in KNOWN_UNARY:
                raise ValueError(f"unsupported unary function {sym!r}")
            specs.append((UNARY, sym))
        if n_vars < 1:
            raise ValueError("n_vars must be >= 1")
        specs.extend((VARIABLE, f"x{i + 1}") for i in range(n_vars))
        if constant:
            specs.append((CONSTANT, "c"))
        if one:
            specs.append((ONE, "1"))
        return cls([Token(i, kind, _ARITY[kind], sym) for i, (kind, sym) in enumerate(specs)])

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "TokenLibrary":
        """Rebuild a library from its symbol list (the order is kept)."""
        specs = []
        for sym in symbols:
            if sym in KNOWN_BINARY:
                specs.append((BINARY, sym))
            elif sym in KNOWN_UNARY:
                specs.append((UNARY, sym))
            elif sym == "c":
                specs.append((CONSTANT, sym))
            elif sym == "1":
                specs.append((ONE, sym))
            elif re.fullmatch(r"x[1-9][0-9]*", sym):
                specs.append((VARIABLE, sym))
            else:
                raise ValueError(f"unknown token symbol {sym!r}")
        return cls([Token(i, kind, _ARITY[kind], sym) for i, (kind, sym) in enumerate(specs)])

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, i: int) -> Token:
        return self.tokens[i]

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._by_symbol

    def index(self, symbol: str) -> int:
        try:
            return self._by_symbol[symbol].id
        except KeyError:
            raise KeyError(f"symbol {symbol!r} not in library") from None

    @property
    def symbols(self) -> list[str]:
        return [t.symbol for t in self.tokens]

    def __eq__(self, other):
        return isinstance(other, TokenLibrary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"TokenLibrary({' '.join(self.symbols)})"


LEFT, RIGHT, ROOT = "left", "right", "root"


@dataclass(frozen=True, eq=False)
class ExprTree:
    """BFS-ordered node arrays.

    ``parents[n]`` is ``-1`` for the root. A unary node's single child sits in
    the left slot.
    """

    library: TokenLibrary
    tokens: tuple[int, ...]
    parents: tuple[int, ...]
    slots: tuple[str, ...]
    depth: tuple[int, ...] = ()
    horizontal: tuple[float, ...] = ()
    complete: bool = True

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], library: TokenLibrary) -> "ExprTree":
        """Build a (possibly incomplete) tree from a BFS token sequence."""
        tokens = tuple(int(t) for t in tokens)
        parents: list[int] = []
        slots: list[str] = []
        # open slots awaiting a token, in BFS order
        queue: list[tuple[int, str]] = [(-1, ROOT)]
        head = 0
        for n, tok in enumerate(tokens):
            if head >= len(queue):
                raise StructureError(f"token {n} placed after the tree was already complete")
            parent, slot = queue[head]
            head += 1
            parents.append(parent)
            slots.append(slot)
            arity = library.arities[tok]
            if arity >= 1:
                queue.append((n, LEFT))
            if arity == 2:
                queue.append((n, RIGHT))
        complete = head == len(queue)
        return assign_positions(cls(library, tokens, tuple(parents), tuple(slots), complete=complete))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, ExprTree) and self.tokens == other.tokens and self.library == other.library

    def __hash__(self):
        return hash(self.tokens)

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.tokens]
        for n, p in enumerate(self.parents):
            if p >= 0:
                kids[p].append(n)
        return kids

    @property
    def n_constants(self) -> int:
        cid = self.library.constant_id
        return sum(1 for t in self.tokens if t == cid) if cid is not None else 0

    def symbols(self) -> list[str]:
        return [self.library[t].symbol for t in self.tokens]


def assign_positions(tree: ExprTree) -> ExprTree:
    """Return ``tree`` with depth and horizontal positions filled in.

    The root sits at ``(1, 1/2)``; a left child is placed at
    ``h_parent - 2**-d_child`` and a right child at ``h_parent + 2**-d_child``.
    """
    n = len(tree.tokens)
    if len(tree.parents) != n or len(tree.slots) != n:
        raise StructureError("parents/slots length does not match tokens")
    depth = [0] * n
    horiz = [0.0] * n
    filled: dict[int, set[str]] = {}
    for i, (p, slot) in enumerate(zip(tree.parents, tree.slots)):
        if i == 0:
            if p != -1 or slot != ROOT:
                raise StructureError("node 0 must be the root")
            depth[0], horiz[0] = 1, 0.5
            continue
        if not 0 <= p < i:
            raise StructureError(f"node {i}: parent {p} does not precede it in BFS order")
        if slot not in (LEFT, RIGHT):
            raise StructureError(f"node {i}: bad child slot {slot!r}")
        arity = tree.library.arities[tree.tokens[p]]
        used = filled.setdefault(p, set())
        if slot in used or len(used) >= arity or (slot == RIGHT and arity < 2):
            raise StructureError(f"node {i}: parent {p} cannot take a {slot} child")
        used.add(slot)
        d = depth[p] + 1
        step = 2.0 ** -d
        depth[i] = d
        horiz[i] = horiz[p] - step if slot == LEFT else horiz[p] + step
    return ExprTree(tree.library, tree.tokens, tree.parents, tree.slots, tuple(depth), tuple(horiz), tree.complete)


def dpe_encode(d: float, h: float, D: int) -> np.ndarray:
    """Dual-indexed sinusoidal encoding of depth ``d`` and horizontal ``h``.

    Returns ``2*D`` values: depth channels with base 10000 followed by
    horizontal channels with base 10. Odd ``D`` keeps the first ``D`` entries
    of each interleaved sin/cos sequence.
    """
    if D < 1:
        raise ValueError("D must be >= 1")
    k = np.arange(D)
    expo = 4.0 * (k // 2) / D
    depth_arg = d / 10000.0**expo
    horiz_arg = h / 10.0**expo
    even = k % 2 == 0
    out = np.empty(2 * D)
    out[:D] = np.where(even, np.sin(depth_arg), np.cos(depth_arg))
    out[D:] = np.where(even, np.sin(horiz_arg), np.cos(horiz_arg))
    return out


@dataclass(frozen=True, eq=False)
class Expression:
    tree: ExprTree
    constants: tuple[float, ...] = field(default=())

    def __post_init__(self):
        consts = tuple(float(c) for c in self.constants)
        if len(consts) != self.tree.n_constants:
            if not consts:
                consts = (1.0,) * self.tree.n_constants
            else:
                raise ValueError(
                    f"expected {self.tree.n_constants} constants, got {len(consts)}"
                )
        if not all(math.isfinite(c) for c in consts):
            raise ValueError("constants must be finite")
        object.__setattr__(self, "constants", consts)

    @classmethod
    def parse(cls, text: str, library: TokenLibrary) -> "Expression":
        return parse_infix(text, library)

    @property
    def library(self) -> TokenLibrary:
        return self.tree.library

    def with_constants(self, constants: Sequence[float]) -> "Expression":
        return Expression(self.tree, tuple(constants))

    def __eq__(self, other):
        return isinstance(other, Expression) and self.tree == other.tree and self.constants == other.constants

    def __hash__(self):
        return hash((self.tree, self.constants))

    def __str__(self):
        return to_infix(self)

    def __repr__(self):
        return f"Expression({to_infix(self)!r})"


# ---------------------------------------------------------------------------
# evaluation


def _square(a):
    return a * a


_UNARY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "log": np.log,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "square": _square,
}
_BINARY_FUNCS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    # np.power returns nan for negative bases with non-integer exponents
    "^": np.power,
}


def _clean(v):
    # one reduction is cheaper than isfinite().all(); an overflowing sum just
    # takes the slow path, which leaves finite entries alone
    if not np.isfinite(np.add.reduce(v, axis=None)):
        v = np.where(np.isfinite(v), v, np.nan)
    return v


_VAR, _CONST, _ONE, _UN, _BIN = range(5)


def _program(tree: ExprTree) -> tuple:
    """Post-order op list for ``tree``, memoised on the tree object."""
    prog = tree.__dict__.get("_prog")
    if prog is not None:
        return prog
    lib = tree.library
    kids = tree.children()
    ops = []
    slot = tree.n_constants
    for i in range(len(tree.tokens) - 1, -1, -1):
        tok = lib[tree.tokens[i]]
        if tok.kind == VARIABLE:
            ops.append((_VAR, i, lib.variable_column[tok.id]))
        elif tok.kind == CONSTANT:
            # walking backwards, so BFS constant numbering counts down
            slot -= 1
            ops.append((_CONST, i, slot))
        elif tok.kind == ONE:
            ops.append((_ONE, i, None))
        elif tok.kind == UNARY:
            ops.append((_UN, i, (_UNARY_FUNCS[tok.symbol], kids[i][0])))
        else:
            ops.append((_BIN, i, (_BINARY_FUNCS[tok.symbol], kids[i][0], kids[i][1])))
    prog = tuple(ops)
    tree.__dict__["_prog"] = prog
    return prog


def evaluate_tokens(tree: ExprTree, X: np.ndarray, constants: np.ndarray) -> np.ndarray:
    """Evaluate a complete tree for one or several constant vectors.

    ``constants`` has shape ``(n_constants,)`` or ``(K, n_constants)``; in the
    second case the result has shape ``(K, S)``. Rows with a domain violation
    come back as NaN.
    """
    constants = np.asarray(constants, dtype=float)
    batched = constants.ndim == 2
    S = X.shape[0]
    # constants and the literal one stay as small arrays and broadcast
    cshape = (constants.shape[0], 1) if batched else (1,)
    values: list = [None] * len(tree.tokens)
    with np.errstate(all="ignore"):
        for code, i, arg in _program(tree):
            if code == _VAR:
                v = X[:, arg]
            elif code == _CONST:
                v = constants[..., arg].reshape(cshape)
            elif code == _ONE:
                v = np.ones(1)
            elif code == _UN:
                v = _clean(arg[0](values[arg[1]]))
            else:
                v = _clean(arg[0](values[arg[1]], values[arg[2]]))
            values[i] = v
    shape = (constants.shape[0], S) if batched else (S,)
    return np.array(np.broadcast_to(values[0], shape), dtype=float, copy=True)


def evaluate(expr: Expression, X: np.ndarray) -> np.ndarray:
    """Row-wise evaluation of ``expr`` on ``X`` (shape ``S x V``).

    Poisoned rows (log of a non-positive number, division by zero, overflow,
    non-real powers, ...) are NaN; use :func:`is_poisoned` for the
    expression-level flag.
    """
    if not expr.tree.complete:
        raise ValueError("cannot evaluate an incomplete tree")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = expr.library.variable_column
    used = {cols[t] for t in expr.tree.tokens if t in cols}
    if used and max(used) >= X.shape[1]:
        raise ValueError(f"X has {X.shape[1]} columns, expression reads column {max(used) + 1}")
    return evaluate_tokens(expr.tree, X, np.asarray(expr.constants, dtype=float))


def is_poisoned(values: np.ndarray) -> bool:
    return not bool(np.isfinite(values).all())


def complexity(expr: Expression | ExprTree) -> int:
    """Node count plus the number of constant tokens."""
    tree = expr.tree if isinstance(expr, Expression) else expr
    return len(tree.tokens) + tree.n_constants


# ---------------------------------------------------------------------------
# infix text


def _format_constant(value: float) -> str:
    text = f"{value:.17g}"
    if not re.search(r"[.eEn]", text):
        text += ".0"
    return f"({text})" if value < 0 else text


def to_infix(expr: Expression | ExprTree, placeholders: bool | None = None) -> str:
    """Render as infix text.

    With ``placeholders`` (the default for a bare tree) constant tokens print
    as ``c``; otherwise their values print with 17 significant digits so that
    :func:`parse_infix` restores them exactly.
    """
    if isinstance(expr, ExprTree):
        tree, consts = expr, None
        placeholders = True if placeholders is None else placeholders
    else:
        tree, consts = expr.tree, expr.constants
        placeholders = False if placeholders is None else placeholders
    if not tree.complete:
        raise ValueError("cannot print an incomplete tree")
    lib = tree.library
    kids = tree.children()
    const_index = {}
    for i, t in enumerate(tree.tokens):
        if t == lib.constant_id:
            const_index[i] = len(const_index)

    def render(i: int) -> tuple[str, int]:
        tok = lib[tree.tokens[i]]
        if tok.kind == CONSTANT:
            if placeholders or consts is None:
                return "c", _ATOM
            return _format_constant(consts[const_index[i]]), _ATOM
        if tok.arity == 0:
            return tok.symbol, _ATOM
        if tok.kind == UNARY:
            inner, _ = render(kids[i][0])
            return f"{tok.symbol}({inner})", _ATOM
        prec = _PRECEDENCE[tok.symbol]
        (ls, lp), (rs, rp) = render(kids[i][0]), render(kids[i][1])
        if tok.symbol == "^":
            left_paren, right_paren = lp <= prec, rp < prec
        else:
            left_paren, right_paren = lp < prec, rp <= prec
        if left_paren:
            ls = f"({ls})"
        if right_paren:
            rs = f"({rs})"
        if tok.symbol == "^":
            return f"{ls}^{rs}", prec
        return f"{ls} {tok.symbol} {rs}", prec

    return render(0)[0]


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str, library: TokenLibrary):
        self.text = text
        self.lib = library
        self.items: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos == len(text):
                break
            m = _TOKEN_RE.match(text, pos)
            if not m:
                raise ParseError(f"unexpected character {text[pos]!r}", pos)
            kind = m.lastgroup
            start = m.start(kind)
            self.items.append((kind, m.group(kind), start))
            pos = m.end()
        self.items.append(("end", "", len(text)))
        self.i = 0

    def peek(self):
        return self.items[self.i]

    def take(self):
        item = self.items[self.i]
        self.i += 1
        return item

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val or 'end of input'!r}", pos)

    # nodes are (symbol, children, constant value or None)
    def parse(self):
        node = self.sum()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", pos)
        return node

    def sum(self):
        node = self.product()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, [node, self.product()], None)
        return node

    def product(self):
        node = self.power()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, [node, self.power()], None)
        return node

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return ("^", [base, self.power()], None)
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "op" and val == "(":
            if self.peek()[1] == "-" and self.items[self.i + 1][0] == "num":
                self.take()
                num = self.take()
                self.expect(")")
                return ("c", [], -float(num[1]))
            node = self.sum()
            self.expect(")")
            return node
        if kind == "num":
            if val == "1":
                if self.lib.one_id is None:
                    raise ParseError("literal 1 not in library", pos)
                return ("1", [], None)
            return ("c", [], float(val))
        if kind == "name":
            if val == "c":
                return ("c", [], None)
            if val not in self.lib:
                raise ParseError(f"unknown symbol {val!r}", pos)
            tok = self.lib[self.lib.index(val)]
            if tok.kind == UNARY:
                self.expect("(")
                arg = self.sum()
                self.expect(")")
                return (val, [arg], None)
            if tok.arity != 0:
                raise ParseError(f"operator {val!r} used as an operand", pos)
            return (val, [], None)
        raise ParseError(f"unexpected {val or 'end of input'!r}", pos)


def parse_infix(text: str, library: TokenLibrary) -> Expression:
    """Parse infix text produced by :func:`to_infix` (or written by hand).

    ``c`` is a constant placeholder (value 1.0), the integer ``1`` is the
    literal-one token and any other number becomes a constant token holding
    that value.
    """
    root = _Parser(text, library).parse()
    if library.constant_id is None and _has_constant(root):
        raise ParseError("numeric constants need a constant token in the library", 0)
    # breadth-first flattening
    tokens: list[int] = []
    consts: list[float] = []
    frontier = [root]
    while frontier:
        nxt = []
        for sym, kids, value in frontier:
            if sym == "c":
                tokens.append(library.constant_id)
                consts.append(1.0 if value is None else value)
            else:
                tokens.append(library.index(sym))
            nxt.extend(kids)
        frontier = nxt
    tree = ExprTree.from_tokens(tokens, library)
    return Expression(tree, tuple(consts))


def _has_constant(node) -> bool:
    sym, kids, _ = node
    return sym == "c" or any(_has_constant(k) for k in kids)


# ---------------------------------------------------------------------------
# numeric equivalence


def numeric_equiv(
    candidate: Expression,
    target: Expression,
    domain: Sequence[tuple[float, float]],
    n_points: int = 1024,
    seed: int = 0,
) -> bool:
    """True when both expressions agree on quasi-random points of ``domain``.

    Agreement means ``max |a - b| <= 1e-9 * (1 + max |b|)`` over the points
    where both are defined. More than 10% poisoned points fails the check.
    """
    from scipy.stats import qmc

    domain = np.asarray(domain, dtype=float).reshape(-1, 2)
    sampler = qmc.Halton(d=len(domain), scramble=True, seed=seed)
    X = qmc.scale(sampler.random(n_points), domain[:, 0], domain[:, 1])
    a = evaluate(candidate, X)
    b = evaluate(target, X)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.mean() < 0.9:
        return False
    scale = 1.0 + np.max(np.abs(b[ok]))
    return bool(np.max(np.abs(a[ok] - b[ok])) <= 1e-9 * scale)
