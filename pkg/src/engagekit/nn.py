"""Dense-network numerics: layers, exact gradients, Adam, checkpoints.

Everything runs in 64-bit floats on numpy. Networks are assembled from a
handful of node types (dense, gelu, dropout, frame pooling, plus the
conditioning nodes defined elsewhere); each node implements an explicit
forward/backward pair, so there is no general autodiff. The two-class head is
a softmax whose gradient is fused with the cross-entropy loss.

Checkpoint container (``ENGNET01``), little-endian:

    offset  size  field
    0       8     magic ``ENGNET01``
    8       4     u32 length of the config JSON
    12      ...   config JSON (utf-8)
    ...     4     u32 tensor count
    per tensor:
            2     u16 name length, then the utf-8 name
            1     u8 ndim
            4*nd  u32 dims
            8*n   f64 row-major payload
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np
from scipy.special import ndtr

CHECKPOINT_MAGIC = b"ENGNET01"

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(Exception):
    """Non-finite numbers where finite ones are required (CLI exit code 3)."""


def make_rng(seed: int, *key) -> np.random.Generator:
    """Deterministic generator for (seed, key...); distinct keys split streams."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# elementwise math
# ---------------------------------------------------------------------------

def gelu(x):
    """Exact Gaussian-CDF form x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def spatial_max_pool(maps):
    """Max over the HxW grid per (frame, channel): (..., C, H, W) -> (..., C)."""
    maps = np.asarray(maps)
    if maps.ndim < 3:
        raise ValueError(f"spatial_max_pool expects (..., C, H, W), got shape {maps.shape}")
    return maps.max(axis=(-2, -1))


def temporal_avg_pool(x):
    """Mean over the frame axis: (..., T, C) -> (..., C)."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError(f"temporal_avg_pool expects (..., T, C), got shape {x.shape}")
    return x.mean(axis=-2)


def onehot(labels, n_classes: int = 2):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------

class Context:
    """Per-forward state: mode, generator, and the batch's time embeddings."""

    def __init__(self, mode="eval", rng=None, embed_unique=None, embed_inverse=None,
                 zero_branches=()):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.rng = rng
        self.embed_unique = embed_unique      # (K, D) embeddings of the batch's levels
        self.embed_inverse = embed_inverse    # (B,) index into embed_unique
        self.zero_branches = frozenset(zero_branches)  # ablation hook


class Node:
    def param_items(self):
        return []

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, grad_y, cache, ctx, grads, prefix):
        raise NotImplementedError


class Dense(Node):
    """y = x W^T + b with uniform Glorot init from the supplied generator."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.b = np.zeros(n_out, dtype=np.float64)

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, ctx):
        if x.shape[-1] != self.W.shape[1]:
            raise ValueError(f"dense layer expects {self.W.shape[1]} inputs, got {x.shape[-1]}")
        return x @ self.W.T + self.b, x

    def backward(self, grad_y, x, ctx, grads, prefix):
        grads[prefix + "W"] = grad_y.T @ x
        grads[prefix + "b"] = grad_y.sum(axis=0)
        return grad_y @ self.W


class Gelu(Node):
    def forward(self, x, ctx):
        return gelu(x), x

    def backward(self, grad_y, x, ctx, grads, prefix):
        return grad_y * gelu_grad(x)


class Dropout(Node):
    """Inverted dropout: scales kept units by 1/(1-p) at train time only."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x, ctx):
        if ctx.mode != "train" or self.p == 0.0:
            return x, None
        keep = ctx.rng.random(x.shape) >= self.p
        scale = 1.0 / (1.0 - self.p)
        return x * keep * scale, keep

    def backward(self, grad_y, keep, ctx, grads, prefix):
        if keep is None:
            return grad_y
        return grad_y * keep * (1.0 / (1.0 - self.p))


class FramePool(Node):
    """Collapse a frame-feature window to a 512 vector.

    Accepts (B, C) pre-pooled vectors, (B, T, C) per-frame vectors, or
    (B, T, C, H, W) per-frame maps. Gradients do not propagate through the
    pooling (nothing upstream is trainable; the backbone is frozen input).
    """

    def forward(self, x, ctx):
        if x.ndim == 2:
            return x, None
        if x.ndim == 3:
            return temporal_avg_pool(x), None
        if x.ndim == 5:
            return temporal_avg_pool(spatial_max_pool(x)), None
        raise ValueError(f"frame input must have 2, 3 or 5 dims, got shape {x.shape}")

    def backward(self, grad_y, cache, ctx, grads, prefix):
        return None


# ---------------------------------------------------------------------------
# network container
# ---------------------------------------------------------------------------

class Chain:
    def __init__(self, nodes):
        self.nodes = list(nodes)

    def forward(self, x, ctx):
        caches = []
        for node in self.nodes:
            x, cache = node.forward(x, ctx)
            caches.append(cache)
        return x, caches

    def backward(self, grad, caches, ctx, grads, prefix):
        for i in range(len(self.nodes) - 1, -1, -1):
            grad = self.nodes[i].backward(grad, caches[i], ctx, grads, f"{prefix}{i}.")
            if grad is None and i > 0:
                raise NumericError("gradient chain broken mid-network")
        return grad


class Network:
    """Branches (one per input modality) concatenated into a head chain.

    ``forward`` returns class probabilities plus a tape; ``backward`` starts
    from the fused softmax cross-entropy gradient (probs - onehot) / B.
    """

    def __init__(self, branches, head: Chain, config: dict):
        self.branches = OrderedDict(branches)
        self.head = head
        self.config = dict(config)

    def chains(self):
        for key, chain in self.branches.items():
            yield key + ".", chain
        yield "head.", self.head

    def parameters(self) -> OrderedDict:
        params = OrderedDict()
        for prefix, chain in self.chains():
            for i, node in enumerate(chain.nodes):
                for name, arr in node.param_items():
                    params[f"{prefix}{i}.{name}"] = arr
        return params

    def state_copy(self) -> OrderedDict:
        return OrderedDict((k, v.copy()) for k, v in self.parameters().items())

    def load_state(self, state):
        params = self.parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for name, arr in params.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def forward(self, inputs: dict, ctx: Context):
        outs, tapes = [], {}
        for key, chain in self.branches.items():
            if key not in inputs:
                raise ValueError(f"missing input for branch {key!r}")
            out, caches = chain.forward(np.asarray(inputs[key], dtype=np.float64), ctx)
            if key in ctx.zero_branches:
                out = np.zeros_like(out)
            outs.append(out)
            tapes[key] = caches
        fused = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        logits, head_caches = self.head.forward(fused, ctx)
        probs = softmax(logits)
        tape = {"branch_caches": tapes, "head_caches": head_caches,
                "split": [o.shape[1] for o in outs], "probs": probs}
        return probs, tape

    def backward(self, tape, labels, ctx: Context) -> OrderedDict:
        probs = tape["probs"]
        B = probs.shape[0]
        grad = (probs - onehot(labels, probs.shape[1])) / B
        grads = OrderedDict()
        grad = self.head.backward(grad, tape["head_caches"], ctx, grads, "head.")
        offsets = np.cumsum([0] + tape["split"])
        for (key, chain), lo, hi in zip(self.branches.items(), offsets[:-1], offsets[1:]):
            if not chain.nodes:
                continue
            if grad is None:
                raise NumericError("head did not propagate a gradient to the branches")
            chain.backward(grad[:, lo:hi], tape["branch_caches"][key], ctx, grads, key + ".")
        # return grads in parameter order so optimizers can zip them
        ordered = OrderedDict()
        for name in self.parameters():
            ordered[name] = grads[name]
        return ordered


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; epsilon is added after the square root."""

    def __init__(self, params: OrderedDict, lr: float = 0.005,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(config: dict, params: OrderedDict, path):
    blob = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(blob_len).decode())
        (n_tensors,) = struct.unpack("<I", f.read(4))
        params = OrderedDict()
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)
    return config, params
