"""Decoder-only expression generator with attention in DCT frequency space.

All parameters live in one flat float64 vector. :class:`ParamLayout` maps
names to slices of that vector, and the forward pass takes the flat vector
directly, so gradients, snapshots and checkpoints never need to know the
internal structure.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .expr import dpe_encode

__all__ = [
    "ModelConfig",
    "ParamLayout",
    "init_params",
    "dct_matrix",
    "dct_forward",
    "clip_frequencies",
    "freq_attention",
    "idct_restore",
    "position_rows",
    "step_log_probs",
    "predict_next",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 10
    ff_dim: int = 2048
    n_layers: int = 1
    n_heads: int = 1
    dct_clip: int = 8
    max_nodes: int = 32

    def __post_init__(self):
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 2")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_layers < 1 or self.dct_clip < 1 or self.ff_dim < 1:
            raise ValueError("n_layers, dct_clip and ff_dim must be positive")


class ParamLayout:
    """Stable name -> (offset, shape) map over the flat parameter vector."""

    def __init__(self, config: ModelConfig):
        r, V, Fd = config.embed_dim, config.vocab_size, config.ff_dim
        # one extra embedding row marks the query slot that has no token yet
        entries = [("embed", (V + 1, r))]
        for l in range(config.n_layers):
            entries += [
                (f"l{l}.ln1.g", (r,)),
                (f"l{l}.ln1.b", (r,)),
                (f"l{l}.Q", (r, r)),
                (f"l{l}.K", (r, r)),
                (f"l{l}.V", (r, r)),
                (f"l{l}.ln2.g", (r,)),
                (f"l{l}.ln2.b", (r,)),
                (f"l{l}.W1", (r, Fd)),
                (f"l{l}.b1", (Fd,)),
                (f"l{l}.W2", (Fd, r)),
                (f"l{l}.b2", (r,)),
            ]
        entries += [("lnf.g", (r,)), ("lnf.b", (r,)), ("head.W", (r, V)), ("head.b", (V,))]
        self.config = config
        self.entries = []
        offset = 0
        for name, shape in entries:
            size = int(np.prod(shape))
            self.entries.append((name, shape, offset))
            offset += size
        self.size = offset
        self._index = {name: (shape, off) for name, shape, off in self.entries}

    def unflatten(self, theta):
        """Views into ``theta`` (numpy array or tensor) keyed by name."""
        out = {}
        for name, shape, off in self.entries:
            out[name] = theta[off : off + int(np.prod(shape))].reshape(shape)
        return out

    def flatten(self, parts: dict) -> np.ndarray:
        theta = np.empty(self.size)
        for name, shape, off in self.entries:
            theta[off : off + int(np.prod(shape))] = np.asarray(parts[name], dtype=float).reshape(-1)
        return theta

    def slice(self, name: str) -> slice:
        shape, off = self._index[name]
        return slice(off, off + int(np.prod(shape)))


@lru_cache(maxsize=64)
def layout_for(config: ModelConfig) -> ParamLayout:
    return ParamLayout(config)


def init_params(config: ModelConfig, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    layout = ParamLayout(config)
    r, Fd = config.embed_dim, config.ff_dim
    parts = {}
    for name, shape, _ in layout.entries:
        if name.endswith(".g"):
            parts[name] = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            parts[name] = np.zeros(shape)
        elif name == "embed":
            parts[name] = rng.normal(0.0, 0.5, shape)
        elif name.endswith(".W1"):
            parts[name] = rng.normal(0.0, 1.0 / math.sqrt(r), shape)
        elif name.endswith(".W2"):
            parts[name] = rng.normal(0.0, 1.0 / math.sqrt(Fd), shape)
        elif name == "head.W":
            # near-uniform initial policy
            parts[name] = rng.normal(0.0, 0.1 / math.sqrt(r), shape)
        else:
            parts[name] = rng.normal(0.0, 1.0 / math.sqrt(r), shape)
    return layout.flatten(parts)


# ---------------------------------------------------------------------------
# frequency-domain transforms


@lru_cache(maxsize=256)
def _dct_np(N: int) -> np.ndarray:
    k = np.arange(N)[:, None]
    n = np.arange(N)[None, :]
    C = np.cos(np.pi / N * (n + 0.5) * k)
    C[0] *= math.sqrt(1.0 / N)
    C[1:] *= math.sqrt(2.0 / N)
    return C


def dct_matrix(N: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C[k, n] = a_k cos(pi/N (n + 1/2) k)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return _dct_np(N).copy()


@lru_cache(maxsize=256)
def _dct_t(N: int) -> torch.Tensor:
    return torch.from_numpy(_dct_np(N))


def dct_forward(H):
    """``C @ H`` along the sequence axis (second to last)."""
    if isinstance(H, torch.Tensor):
        return _dct_t(H.shape[-2]) @ H
    H = np.asarray(H, dtype=float)
    return _dct_np(H.shape[-2]) @ H


def clip_frequencies(Hhat, M: int):
    """Keep the first ``min(M, N)`` frequency rows."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return Hhat[..., : min(M, Hhat.shape[-2]), :]


def idct_restore(A, N: int):
    """``C.T @ [A; 0]``: zero-pad the frequency rows back to ``N`` and invert."""
    m = A.shape[-2]
    if m > N:
        raise ValueError("more frequency rows than sequence length")
    if isinstance(A, torch.Tensor):
        return _dct_t(N)[:m].T @ A
    return _dct_np(N)[:m].T @ np.asarray(A, dtype=float)


def freq_attention(Hm, Q, K, V, n_heads: int = 1, return_weights: bool = False):
    """Scaled dot-product self-attention over clipped frequency rows.

    Works on numpy arrays or tensors with a leading batch axis or none.
    """
    is_torch = isinstance(Hm, torch.Tensor)
    if not is_torch:
        Hm, Q, K, V = (torch.as_tensor(np.asarray(a, dtype=float)) for a in (Hm, Q, K, V))
    q, k, v = Hm @ Q, Hm @ K, Hm @ V
    r = q.shape[-1]
    dh = r // n_heads
    if n_heads == 1:
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(r), dim=-1)
        out = w @ v
    else:
        split = lambda t: t.reshape(*t.shape[:-1], n_heads, dh).transpose(-2, -3)
        qh, kh, vh = split(q), split(k), split(v)
        w = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (w @ vh).transpose(-2, -3).reshape(q.shape)
    if not is_torch:
        out, w = out.numpy(), w.numpy()
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# forward pass


def position_rows(depth, horizontal, embed_dim: int) -> np.ndarray:
    """Stack DPE rows for a sequence of (depth, horizontal) pairs."""
    D = embed_dim // 2
    return np.array([dpe_encode(d, h, D) for d, h in zip(depth, horizontal)]).reshape(-1, embed_dim)


def _layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def _as_tensor(theta) -> torch.Tensor:
    if isinstance(theta, torch.Tensor):
        return theta
    return torch.from_numpy(np.ascontiguousarray(theta, dtype=np.float64))


def query_logits(theta, config: ModelConfig, prefix: np.ndarray, positions: np.ndarray) -> torch.Tensor:
    """Logits for the query slot of a batch of equal-length prefixes.

    ``prefix`` is ``(n, t)`` token ids, ``positions`` is ``(n, t + 1, r)`` DPE
    rows whose last row belongs to the slot being predicted.
    """
    p = layout_for(config).unflatten(_as_tensor(theta))
    n, t = prefix.shape
    V = config.vocab_size
    ids = np.concatenate([prefix, np.full((n, 1), V, dtype=np.int64)], axis=1)
    H = p["embed"][torch.from_numpy(ids)] + torch.from_numpy(positions)
    N = t + 1
    C = _dct_t(N)
    m = min(config.dct_clip, N)
    for l in range(config.n_layers):
        last = l == config.n_layers - 1
        X = _layer_norm(H, p[f"l{l}.ln1.g"], p[f"l{l}.ln1.b"])
        Xm = C[:m] @ X
        A = freq_attention(Xm, p[f"l{l}.Q"], p[f"l{l}.K"], p[f"l{l}.V"], config.n_heads)
        if last:
            # downstream ops are row-wise, so only the query row is needed
            H = H[:, -1] + (C[:m, -1] @ A)
        else:
            H = H + C[:m].T @ A
        X = _layer_norm(H, p[f"l{l}.ln2.g"], p[f"l{l}.ln2.b"])
        H = H + F.gelu(X @ p[f"l{l}.W1"] + p[f"l{l}.b1"]) @ p[f"l{l}.W2"] + p[f"l{l}.b2"]
    H = _layer_norm(H, p["lnf.g"], p["lnf.b"])
    return H @ p["head.W"] + p["head.b"]


def masked_log_softmax(logits: torch.Tensor, legal: np.ndarray | torch.Tensor) -> torch.Tensor:
    legal = torch.as_tensor(legal, dtype=torch.bool)
    return torch.log_softmax(logits.masked_fill(~legal, -math.inf), dim=-1)


def step_log_probs(theta, config: ModelConfig, prefix, positions, legal) -> torch.Tensor:
    """Masked log-probabilities ``(n, V)`` for one generation step."""
    return masked_log_softmax(query_logits(theta, config, prefix, positions), legal)


def predict_next(tree_prefix, theta, config: ModelConfig, query_position: tuple[int, float]) -> np.ndarray:
    """Logits for the next BFS slot of a single prefix tree."""
    t = len(tree_prefix.tokens)
    if t >= config.max_nodes:
        raise ValueError(f"prefix of {t} nodes exceeds the node budget {config.max_nodes}")
    depth = list(tree_prefix.depth) + [query_position[0]]
    horiz = list(tree_prefix.horizontal) + [query_position[1]]
    pos = position_rows(depth, horiz, config.embed_dim)[None]
    prefix = np.asarray(tree_prefix.tokens, dtype=np.int64).reshape(1, t)
    with torch.no_grad():
        return query_logits(theta, config, prefix, pos)[0].numpy()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"FREQSR-PARAMS\n"


def save_checkpoint(path, theta: np.ndarray, config: ModelConfig, meta: dict | None = None) -> None:
    """Header line of sorted JSON, then little-endian float64 values."""
    layout = ParamLayout(config)
    theta = np.asarray(theta, dtype="<f8")
    if theta.shape != (layout.size,):
        raise ValueError("parameter vector does not match the layout")
    header = {
        "version": 1,
        "config": asdict(config),
        "layout": [[name, list(shape), off] for name, shape, off in layout.entries],
        "size": layout.size,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack("<Q", layout.size))
        fh.write(theta.tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, ModelConfig, dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        header = json.loads(fh.readline())
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        (size,) = struct.unpack("<Q", fh.read(8))
        theta = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64)
    config = ModelConfig(**header["config"])
    if size != ParamLayout(config).size or theta.size != size:
        raise ValueError(f"{path}: truncated or inconsistent checkpoint")
    return theta, config, header["meta"]
