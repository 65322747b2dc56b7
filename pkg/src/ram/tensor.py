"""Dense tensors with reverse-mode automatic differentiation.

Every value flowing through the model is a Tensor wrapping a numpy array.
Operations record their parents and a backward closure; `backward` replays
the graph in reverse topological order and accumulates gradients by
summation (required for tied/shared weights).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "no_grad",
    "matmul",
    "matmul_nt",
    "linear",
    "add",
    "add_bias",
    "mul",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "attention",
    "embedding_rows",
    "take_rows",
    "mean_rows",
    "sum_all",
    "cross_entropy",
    "binary_cross_entropy_logit",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Tensor:
    """A dense array node in the computation graph.

    `values` is a numpy array (float32 by default, float64 for gradient
    checking); `requires_grad` marks trainable leaves. Tensors are treated
    as immutable during forward/backward; only the optimizer rewrites
    leaf values in place.
    """

    __slots__ = ("values", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


_grad_enabled = True


@contextmanager
def no_grad():
    """Skip graph recording inside the block (inference passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _node(values: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._op = op
    return out


class Graph:
    """Topologically ordered record of the operations reaching a tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    def backward(self) -> dict[Tensor, np.ndarray]:
        """Gradient of `root` w.r.t. every requires_grad leaf it reaches.

        `root` must be a scalar. Fan-out accumulates by summation; the walk
        is deterministic, so repeated calls are bit-identical.
        """
        if self.root.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.root.shape}")
        grads: dict[Tensor, np.ndarray] = {
            self.root: np.ones_like(self.root.values)
        }
        # buffers this walk owns and may therefore accumulate into in place;
        # closures can hand one array to several parents, so a first
        # contribution is only borrowed
        owned: set[int] = set()
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node, None)
            if g is None:
                continue
            owned.discard(id(g))
            if node._backward is None:
                if node.requires_grad:
                    leaf_grads[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = grads.get(parent)
                if held is None:
                    grads[parent] = pg
                elif id(held) in owned:
                    held += pg
                else:
                    total = held + pg
                    grads[parent] = total
                    owned.add(id(total))
        return leaf_grads


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Convenience wrapper: trace `loss` and run the reverse pass."""
    return Graph(loss).backward()


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), "matmul", bwd)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose (tied-projection heads)."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}^T")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv, g.T @ av

    return _node(av @ bv.T, (a, b), "matmul_nt", bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, shift: float = 0.0) -> Tensor:
    """x @ w + b + shift, with b broadcast over rows.

    `shift` is a fixed (non-trainable) scalar offset; the gate equations
    carry constant -1/+1 shifts that must not fold into the trainable bias.
    """
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {w.shape}")
    out = x.values @ w.values
    if b is not None:
        out += b.values
    if shift:
        out += out.dtype.type(shift)
    xv, wv = x.values, w.values

    if b is None:

        def bwd(g):
            return g @ wv.T, xv.T @ g

        return _node(out, (x, w), "linear", bwd)

    def bwd_b(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0).reshape(b.shape)

    return _node(out, (x, w, b), "linear", bwd_b)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        return g, g

    return _node(a.values + b.values, (a, b), "add", bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-vector bias addition, the one permitted broadcast."""
    if b.values.size != x.shape[-1]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")

    def bwd(g):
        return g, g.sum(axis=0).reshape(b.shape)

    return _node(x.values + b.values, (x, b), "add_bias", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g * bv, g * av

    return _node(av * bv, (a, b), "mul", bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * x.values.dtype.type(c),)

    return _node(x.values * x.values.dtype.type(c), (x,), "scale", bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g,)

    return _node(x.values + x.values.dtype.type(c), (x,), "add_scalar", bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)

    def bwd(g):
        return (g * (1.0 - t * t),)

    return _node(t, (x,), "tanh", bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), "sigmoid", bwd)


def gelu(x: Tensor) -> Tensor:
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * xv.dtype.type(_INV_SQRT2)))
    out = xv * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xv * xv) * xv.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + xv * pdf),)

    return _node(out, (x,), "gelu", bwd)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    y = _softmax(x.values)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), "softmax_rows", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = (xv - mu) * inv
    out = xhat * gain.values + bias.values

    def bwd(g):
        dgain = (g * xhat).sum(axis=0).reshape(gain.shape)
        dbias = g.sum(axis=0).reshape(bias.shape)
        dxhat = g * gain.values
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), "layer_norm", bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention over pre-projected q/k/v.

    Returns (context rows, attention weights). Weights have shape
    (heads, n_q, n_kv) and each row sums to 1; callers may record them
    for attention tracing.
    """
    m, d = q.shape
    n = k.shape[0]
    if d % n_heads:
        raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
    if k.shape != (n, d) or v.shape != (n, d):
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if n == 0:
        raise ValueError("attention needs at least one key")
    dk = d // n_heads
    inv_scale = 1.0 / math.sqrt(dk)
    qh = q.values.reshape(m, n_heads, dk).transpose(1, 0, 2)
    kh = k.values.reshape(n, n_heads, dk).transpose(1, 0, 2)
    vh = v.values.reshape(n, n_heads, dk).transpose(1, 0, 2)
    weights = _softmax(qh @ kh.transpose(0, 2, 1) * q.values.dtype.type(inv_scale))
    out = (weights @ vh).transpose(1, 0, 2).reshape(m, d)

    def bwd(g):
        gh = g.reshape(m, n_heads, dk).transpose(1, 0, 2)
        dv = weights.transpose(0, 2, 1) @ gh
        dw = gh @ vh.transpose(0, 2, 1)
        ds = (dw - (dw * weights).sum(axis=-1, keepdims=True)) * weights * inv_scale
        dq = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
        return (
            dq.transpose(1, 0, 2).reshape(m, d),
            dkh.transpose(1, 0, 2).reshape(n, d),
            dv.transpose(1, 0, 2).reshape(n, d),
        )

    return _node(out, (q, k, v), "attention", bwd), weights


def embedding_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("embedding_rows needs at least one id")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(f"id out of range for table with {table.shape[0]} rows")

    def bwd(g):
        dt = np.zeros_like(table.values)
        np.add.at(dt, idx, g)
        return (dt,)

    return _node(table.values[idx], (table,), "embedding_rows", bwd)


def take_rows(x: Tensor, ids) -> Tensor:
    """Select rows by index (masked-position gather)."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError(f"row index out of range for shape {x.shape}")

    def bwd(g):
        dx = np.zeros_like(x.values)
        np.add.at(dx, idx, g)
        return (dx,)

    return _node(x.values[idx], (x,), "take_rows", bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: (m, d) -> (1, d). Global average pooling."""
    m = x.shape[0]
    out = x.values.mean(axis=0, keepdims=True)

    def bwd(g):
        return (np.repeat(g / m, m, axis=0),)

    return _node(out, (x,), "mean_rows", bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(x.values, g),)

    return _node(np.asarray(x.values.sum(), dtype=x.dtype), (x,), "sum_all", bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of integer targets against logit rows."""
    idx = np.asarray(targets, dtype=np.intp)
    m, c = logits.shape
    if idx.shape != (m,):
        raise ValueError(f"cross_entropy targets shape {idx.shape} for {m} logit rows")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ValueError(f"target id out of range for {c} classes")
    lv = logits.values
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(m), idx]
    out = np.asarray(nll.mean(), dtype=lv.dtype)

    def bwd(g):
        p = _softmax(lv)
        p[np.arange(m), idx] -= 1.0
        return (p * (g / m),)

    return _node(out, (logits,), "cross_entropy", bwd)


def binary_cross_entropy_logit(logit: Tensor, label: float) -> Tensor:
    """Sigmoid cross-entropy of a single logit against a 0/1 label."""
    if logit.values.size != 1:
        raise ValueError(f"binary_cross_entropy_logit needs a scalar, got {logit.shape}")
    z = logit.values
    y = z.dtype.type(label)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        return ((g * (expit(z) - y)).reshape(logit.shape),)

    return _node(np.asarray(out.sum(), dtype=z.dtype), (logit,), "bce_logit", bwd)


def stack_params(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
