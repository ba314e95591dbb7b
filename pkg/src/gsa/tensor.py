"""Dense numpy-backed tensors with reverse-mode differentiation.

Every differentiable op records its inputs plus a small context and names a
backward rule registered in ``RULES``. ``Tensor.backward`` walks the graph in
reverse topological order and calls the rule for each node. Rules are looked
up at backward time, so replacing an entry in ``RULES`` changes every graph
that uses the op (the gradcheck negative-control relies on this).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from gsa import counting

RULES: dict[str, Callable] = {}

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def rule(name: str):
    def deco(fn):
        RULES[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Row-major dense array with an optional gradient slot.

    Leaves created directly are checked for NaN/Inf. Intermediate results are
    not re-checked on every op; losses are checked by the training loop.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 check: bool = True):
        self.data = _as_float_array(data, dtype)
        if check and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple = ()
        self.ctx = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- graph traversal --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = grad.astype(self.dtype, copy=False) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node.op is None or node.grad is None:
                continue
            parent_grads = RULES[node.op](node.ctx, node.grad, node)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), check=False)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor(data, check=False)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    return _node(a.data + b.data, "add", (a, b), (a.shape, b.shape))


@rule("add")
def _add_rule(ctx, g, out):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, "neg", (a,))


@rule("neg")
def _neg_rule(ctx, g, out):
    return (-g,)


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    return _node(a.data * b.data, "mul", (a, b), (a.data, b.data))


@rule("mul")
def _mul_rule(ctx, g, out):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def exp(a: Tensor) -> Tensor:
    return _node(np.exp(a.data), "exp", (a,))


@rule("exp")
def _exp_rule(ctx, g, out):
    return (g * out.data,)


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), "log", (a,), a.data)


@rule("log")
def _log_rule(ctx, g, out):
    return (g / ctx,)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    info = np.finfo(y.dtype)
    # keep the open interval even where the float format saturates;
    # sqrt(tiny) so that products of two gates stay positive
    return np.clip(y, np.sqrt(info.tiny), 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    return _node(_sigmoid_np(a.data), "sigmoid", (a,))


@rule("sigmoid")
def _sigmoid_rule(ctx, g, out):
    y = out.data
    return (g * y * (1.0 - y),)


def relu(a: Tensor) -> Tensor:
    return _node(np.maximum(a.data, 0), "relu", (a,), a.data > 0)


@rule("relu")
def _relu_rule(ctx, g, out):
    return (g * ctx,)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _node(a.data * s, "silu", (a,), (a.data, s))


@rule("silu")
def _silu_rule(ctx, g, out):
    x, s = ctx
    return (g * (s + x * s * (1.0 - s)),)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), "reshape", (a,), a.shape)


@rule("reshape")
def _reshape_rule(ctx, g, out):
    return (g.reshape(ctx),)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    return _node(a.data.transpose(axes), "transpose", (a,), axes)


@rule("transpose")
def _transpose_rule(ctx, g, out):
    return (g.transpose(np.argsort(ctx)),)


def index(a: Tensor, key) -> Tensor:
    return _node(a.data[key], "index", (a,), (key, a.shape))


def _scatter_add(n_rows: int, rows: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``out[rows[i]] += vals[i]`` for 2-D ``vals``; sort + reduceat beats ``np.add.at``."""
    out = np.zeros((n_rows, vals.shape[1]), dtype=vals.dtype)
    if rows.size == 0:
        return out
    order = np.argsort(rows, kind="stable")
    rows = rows[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    out[rows[starts]] = np.add.reduceat(vals[order], starts, axis=0)
    return out


@rule("index")
def _index_rule(ctx, g, out):
    key, shape = ctx
    if isinstance(key, tuple) and len(key) == len(shape) and all(isinstance(k, np.ndarray) for k in key):
        flat = np.ravel_multi_index(np.broadcast_arrays(*key), shape).reshape(-1)
        return (_scatter_add(int(np.prod(shape)), flat, g.reshape(-1, 1)).reshape(shape),)
    full = np.zeros(shape, dtype=g.dtype)
    np.add.at(full, key, g)
    return (full,)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), (axis, keepdims, a.shape))


@rule("sum")
def _sum_rule(ctx, g, out):
    axis, keepdims, shape = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; MACs are charged to the current counting scope."""
    if b.ndim != 2:
        raise ShapeError(f"right operand must be a matrix, got shape {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} @ {b.shape}")
    counting.add(int(np.prod(a.shape[:-1])) * b.shape[0] * b.shape[1])
    return _node(a.data @ b.data, "matmul", (a, b), (a.data, b.data))


@rule("matmul")
def _matmul_rule(ctx, g, out):
    a, b = ctx
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _contract(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum as transpose + batched matmul, which reaches BLAS
    batch = [c for c in so if c in sa and c in sb]
    inner = [c for c in sa if c in sb and c not in so]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    size = {**dict(zip(sa, a.shape)), **dict(zip(sb, b.shape))}

    def n(cs):
        return int(np.prod([size[c] for c in cs], dtype=np.int64))

    A = a.transpose([sa.index(c) for c in batch + free_a + inner]).reshape(n(batch), n(free_a), n(inner))
    B = b.transpose([sb.index(c) for c in batch + inner + free_b]).reshape(n(batch), n(inner), n(free_b))
    order = batch + free_a + free_b
    out = np.matmul(A, B).reshape([size[c] for c in order])
    return out.transpose([order.index(c) for c in so])


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Each input index must appear in the other input or the output."""
    ins, outspec = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated index within one operand in {spec!r}")
        for c in s:
            if c not in other and c not in outspec:
                raise ShapeError(f"index {c!r} in {spec!r} is summed inside a single operand")
    for c in set(sa) & set(sb):
        if a.shape[sa.index(c)] != b.shape[sb.index(c)]:
            raise ShapeError(f"index {c!r} has sizes {a.shape[sa.index(c)]} and {b.shape[sb.index(c)]}")
    data = _contract(sa, sb, outspec, a.data, b.data)
    return _node(data, "einsum", (a, b), (sa, sb, outspec, a.data, b.data))


@rule("einsum")
def _einsum_rule(ctx, g, out):
    sa, sb, so, a, b = ctx
    return _contract(so, sb, sa, g, b), _contract(so, sa, sb, g, a)


# ---------------------------------------------------------------------------
# normalisations and losses
# ---------------------------------------------------------------------------

def _check_mask(mask: np.ndarray, shape, axis: int) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not np.all(np.any(mask, axis=axis)):
        raise ValueError("softmax over an empty mask")
    return mask


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; masked positions come out exactly zero."""
    z = x.data
    if mask is not None:
        mask = _check_mask(mask, z.shape, axis)
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _node(y, "softmax", (x,), axis)


@rule("softmax")
def _softmax_rule(ctx, g, out):
    y = out.data
    return (y * (g - np.sum(g * y, axis=ctx, keepdims=True)),)


def log_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Masked log-softmax. Masked positions are set to 0 (not -inf) and carry no gradient."""
    z = x.data
    if mask is not None:
        mask = _check_mask(mask, z.shape, axis)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    y = z - lse
    if mask is not None:
        y = np.where(mask, y, 0.0).astype(x.dtype, copy=False)
    return _node(y, "log_softmax", (x,), (axis, mask))


@rule("log_softmax")
def _log_softmax_rule(ctx, g, out):
    axis, mask = ctx
    p = np.exp(out.data)
    if mask is not None:
        p = np.where(mask, p, 0.0)
        g = np.where(mask, g, 0.0)
    return (g - p * np.sum(g, axis=axis, keepdims=True),)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over rows of a ``[N, V]`` logit matrix."""
    z = logits.data
    targets = np.asarray(targets).reshape(-1)
    if z.ndim != 2 or z.shape[0] != targets.shape[0]:
        raise ShapeError(f"logits {z.shape} do not match targets {targets.shape}")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m - np.log(s))[np.arange(len(targets)), targets]
    loss = np.asarray(-logp.mean(), dtype=z.dtype)
    return _node(loss, "cross_entropy", (logits,), (e / s, targets))


@rule("cross_entropy")
def _cross_entropy_rule(ctx, g, out):
    p, targets = ctx
    d = p.copy()
    d[np.arange(len(targets)), targets] -= 1.0
    return (d * (g / len(targets)),)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    n = x.data * r
    return _node(n * weight.data, "rms_norm", (x, weight), (n, r, weight.data))


@rule("rms_norm")
def _rms_norm_rule(ctx, g, out):
    n, r, w = ctx
    dn = g * w
    gx = r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
    gw = np.sum((g * n).reshape(-1, n.shape[-1]), axis=0)
    return gx, gw


# ---------------------------------------------------------------------------
# indexing ops
# ---------------------------------------------------------------------------

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    return _node(weight.data[ids], "embedding", (weight,), (ids, weight.shape))


@rule("embedding")
def _embedding_rule(ctx, g, out):
    ids, shape = ctx
    return (_scatter_add(shape[0], ids.reshape(-1), g.reshape(-1, shape[1])),)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[b, idx[b, t, j]]`` for ``x`` of shape ``[B, L, ...]`` -> ``[B, L, K, ...]``."""
    b = np.broadcast_to(np.arange(x.shape[0])[:, None, None], idx.shape)
    return _node(x.data[b, idx], "gather", (x,), (b, idx, x.shape))


@rule("gather")
def _gather_rule(ctx, g, out):
    b, idx, shape = ctx
    B, L = shape[:2]
    rows = (b * L + idx).reshape(-1)
    gx = _scatter_add(B * L, rows, g.reshape(rows.size, -1))
    return (gx.reshape(shape),)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis (half-split layout).

    ``x`` has shape ``[B, L, ..., D]``; ``cos``/``sin`` have shape ``[L, D/2]``.
    """
    extra = x.ndim - 3
    c = cos.reshape(cos.shape[0], *([1] * extra), cos.shape[1]).astype(x.dtype)
    s = sin.reshape(sin.shape[0], *([1] * extra), sin.shape[1]).astype(x.dtype)
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    data = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)
    return _node(data, "rope", (x,), (c, s))


@rule("rope")
def _rope_rule(ctx, g, out):
    c, s = ctx
    half = g.shape[-1] // 2
    g1, g2 = g[..., :half], g[..., half:]
    return (np.concatenate([g1 * c + g2 * s, -g1 * s + g2 * c], axis=-1),)


def rope_tables(length: int, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise ShapeError(f"rotary encoding needs an even dimension, got {dim}")
    inv = base ** (-np.arange(0, dim // 2, dtype=np.float64) * 2.0 / dim)
    ang = np.arange(length, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def assert_finite(t: Tensor | np.ndarray | float, what: str = "value") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite {what}")
