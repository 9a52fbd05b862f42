"""Sinusoidal time embedding and learned scale/shift conditioning.

The coarse session timestep (1, 2 or 3 by 20-minute block) is encoded as a
deterministic, bounded D-vector of interleaved (cos, sin) pairs over a
geometric frequency ladder, then injected into network activations through
zero-initialized linear projections. Three strategies:

    sll   shift the input of the last hidden layer
    ssll  scale and shift the input of the last hidden layer
    ssal  scale and shift every one-dimensional activation, softmax input
          included

All projections start at zero, so every strategy's forward pass is exactly
the unconditioned one until training moves the projection weights.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .nn import Node

DEFAULT_EMBED_DIM = 512
DEFAULT_EMBED_BASE = 10000.0

SHIFT = "shift"
SCALE_SHIFT = "scale_shift"


class Strategy(Enum):
    NONE = "none"
    SLL = "sll"
    SSLL = "ssll"
    SSAL = "ssal"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown conditioning {value!r}; expected one of {names}") from None


def sinusoidal_embedding(t_level: int, dim: int = DEFAULT_EMBED_DIM,
                         base: float = DEFAULT_EMBED_BASE) -> np.ndarray:
    """Embedding vector [cos(t*f_1), sin(t*f_1), ..., cos(t*f_{D/2}), sin(t*f_{D/2})]
    with f_d = base**(-2d/D) for d = 1..D/2."""
    if dim % 2 != 0 or dim <= 0:
        raise ValueError(f"embedding dim must be even and positive, got {dim}")
    d = np.arange(1, dim // 2 + 1, dtype=np.float64)
    freq = base ** (-2.0 * d / dim)
    angle = float(t_level) * freq
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.cos(angle)
    out[1::2] = np.sin(angle)
    return out


def embedding_matrix(t_levels, dim: int = DEFAULT_EMBED_DIM,
                     base: float = DEFAULT_EMBED_BASE) -> np.ndarray:
    return np.stack([sinusoidal_embedding(t, dim, base) for t in np.asarray(t_levels).ravel()])


class Condition(Node):
    """Learned projection of the time embedding applied to one activation.

    SHIFT:        y = x + s
    SCALE_SHIFT:  y = (l + 1) * x + s

    where (l,) s are the projection of the batch's embeddings. Projections are
    batched over the (few) unique time levels in the batch and gathered per
    sample, which keeps the cost independent of batch size.
    """

    def __init__(self, n: int, kind: str, dim: int = DEFAULT_EMBED_DIM):
        if kind not in (SHIFT, SCALE_SHIFT):
            raise ValueError(f"unknown conditioning kind {kind!r}")
        self.n = n
        self.kind = kind
        width = n if kind == SHIFT else 2 * n
        self.P = np.zeros((width, dim), dtype=np.float64)
        self.b = np.zeros(width, dtype=np.float64)

    def param_items(self):
        return [("P", self.P), ("b", self.b)]

    def forward(self, x, ctx):
        if ctx.embed_unique is None or ctx.embed_inverse is None:
            raise ValueError("conditioned forward pass needs time embeddings in the context")
        if x.shape[-1] != self.n:
            raise ValueError(f"conditioning expects width {self.n}, got {x.shape[-1]}")
        proj_unique = ctx.embed_unique @ self.P.T + self.b   # (K, width)
        proj = proj_unique[ctx.embed_inverse]                # (B, width)
        if self.kind == SHIFT:
            return x + proj, x
        l, s = proj[:, :self.n], proj[:, self.n:]
        return (l + 1.0) * x + s, (x, l)

    def backward(self, grad_y, cache, ctx, grads, prefix):
        if self.kind == SHIFT:
            grad_proj = grad_y
            grad_x = grad_y
        else:
            x, l = cache
            grad_proj = np.concatenate([grad_y * x, grad_y], axis=1)
            grad_x = grad_y * (l + 1.0)
        k = ctx.embed_unique.shape[0]
        grad_unique = np.zeros((k, grad_proj.shape[1]), dtype=np.float64)
        np.add.at(grad_unique, ctx.embed_inverse, grad_proj)
        grads[prefix + "P"] = grad_unique.T @ ctx.embed_unique
        grads[prefix + "b"] = grad_proj.sum(axis=0)
        return grad_x


def added_param_count(strategy: Strategy, widths, dim: int = DEFAULT_EMBED_DIM) -> int:
    """Trainable parameters a strategy adds for the given conditioned widths."""
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.NONE:
        return 0
    if strategy in (Strategy.SLL,):
        (n,) = widths
        return n * dim + n
    if strategy is Strategy.SSLL:
        (n,) = widths
        return 2 * n * dim + 2 * n
    return sum(2 * n * dim + 2 * n for n in widths)
