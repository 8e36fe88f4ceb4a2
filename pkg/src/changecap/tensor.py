"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on grad-enabled tensors records its inputs and a gradient
callback on the output node; ``backward`` replays that record once in
reverse topological order.  Arrays are treated as immutable once wrapped.
All arithmetic is 64-bit and single-threaded deterministic.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, reused tape, missing grads."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self, params=None) -> None:
        backward(self, params)


def constant(data) -> Tensor:
    return Tensor(data)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, parents, grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    _check_finite(out.data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` for everything reachable from the scalar ``loss``.

    A tape may be replayed only once; call the forward pass again before the
    next backward.  When ``params`` (iterable of tensors or a name->tensor
    mapping) is given, parameters the loss never touched get zero gradients.
    """
    if loss.data.ndim != 0:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    if loss._backward_ran:
        raise GradientError("backward already ran for this tape; rerun the forward pass")
    loss._backward_ran = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._grad_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._grad_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None or g is node.grad else g
            else:
                parent.grad = parent.grad + g

    if params is not None:
        values = params.values() if hasattr(params, "values") else params
        for p in values:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- elementwise and shape ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        return (g * c,)

    return _make(a.data * c, (a,), grad_fn, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), grad_fn, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def grad_fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        if a.data.ndim > 2 and b.data.ndim == 2:
            # stacked input times a plain weight: one flat gemm instead of a
            # stacked product plus reduction
            ga = np.matmul(g, bt)
            gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.shape)
        gb = _unbroadcast(np.matmul(at, g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), grad_fn, "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), grad_fn, "permute")


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose2d expects a matrix")
    return permute(a, (1, 0))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_last leading dims disagree: {a.shape} vs {b.shape}")
    split = a.shape[-1]

    def grad_fn(g):
        return g[..., :split], g[..., split:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), grad_fn, "concat_last")


def stack_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_rows needs at least one tensor")

    def grad_fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=0), tuple(tensors), grad_fn, "stack_rows")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn, "reduce_mean")


def mean_pool_rows(a: Tensor) -> Tensor:
    """Mean over the token axis (second to last)."""
    if a.ndim < 2:
        raise ValueError("mean_pool_rows expects at least 2 dims")
    return reduce_mean(a, axis=a.ndim - 2)


def max_pool_rows(a: Tensor) -> Tensor:
    """Columnwise max over the token axis; ties route grad to the first row."""
    if a.ndim < 2:
        raise ValueError("max_pool_rows expects at least 2 dims")
    axis = a.ndim - 2
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), grad_fn, "max_pool_rows")


def broadcast_vector_to_grid(v: Tensor, cells: int) -> Tensor:
    """Repeat a (..., D) vector into (..., cells, D) rows."""
    if cells < 1:
        raise ValueError("cells must be positive")
    target = v.shape[:-1] + (cells, v.shape[-1])
    out = np.broadcast_to(v.data[..., None, :], target).copy()

    def grad_fn(g):
        return (g.sum(axis=-2),)

    return _make(out, (v,), grad_fn, "broadcast_vector_to_grid")


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[ids], (table,), grad_fn, "embedding_gather")


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each last-axis row to unit L2 norm; zero rows stay zero."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.where(norm == 0.0, 1.0, norm)
    out = a.data / safe
    nonzero = norm != 0.0

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        ga = (g - out * dot) / safe
        return (np.where(nonzero, ga, 0.0),)

    return _make(out, (a,), grad_fn, "l2_normalize_rows")


# -- normalization / softmax / losses ------------------------------------


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis with max-subtraction.

    ``mask`` (broadcastable bool, True = keep) zeroes the weight of excluded
    positions exactly.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return ((g - dot) * p,)

    return _make(p, (a,), grad_fn, "softmax_rows")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) standardization followed by an affine map."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = a.shape[-1]

    def grad_fn(g):
        gxhat = g * gamma.data
        gbeta = _unbroadcast(g, beta.shape)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gxhat - mean_g - xhat * mean_gx)
        return ga, ggamma, gbeta

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), grad_fn, "layer_norm")


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray,
                              mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmax.

    Accepts (..., U) logits with matching integer targets; ``mask`` rows set
    to False are excluded from the mean (used for PAD positions).
    """
    u = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= u):
        raise IndexError(f"target id out of range for {u} classes")
    flat = logits.data.reshape(-1, u)
    tids = targets.reshape(-1)
    if mask is None:
        keep = np.ones(tids.shape[0], dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross entropy over an empty target set")
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - flat[np.arange(flat.shape[0]), tids]
    loss = (nll * keep).sum() / count

    def grad_fn(g):
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        p[np.arange(flat.shape[0]), tids] -= 1.0
        p *= (keep / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), grad_fn, "cross_entropy_with_logits")


# -- multi-head attention -------------------------------------------------


@dataclass
class MhaParams:
    """Projection weights for one attention block (bias-free); D must divide
    by heads."""

    num_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    head_dim = d // heads
    r = reshape(x, (*lead, n, heads, head_dim))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return permute(r, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, hd = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return reshape(permute(x, axes), (*lead, n, h * hd))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: MhaParams,
                         causal: bool = False, return_weights: bool = False):
    """Scaled dot-product attention with ``p.num_heads`` heads.

    q is (..., Nq, D); k and v are (..., Nk, D).  Per head the scores are
    scaled by 1/sqrt(D/heads); the concatenated heads pass through the output
    projection.  ``causal`` requires Nq == Nk and hides future positions with
    exactly zero weight.
    """
    d = q.shape[-1]
    if d % p.num_heads != 0:
        raise ValueError(f"width {d} not divisible by {p.num_heads} heads")
    nq, nk = q.shape[-2], k.shape[-2]
    if causal and nq != nk:
        raise ValueError("causal attention requires square score matrices")
    head_dim = d // p.num_heads

    qh = _split_heads(matmul(q, p.wq), p.num_heads)
    kh = _split_heads(matmul(k, p.wk), p.num_heads)
    vh = _split_heads(matmul(v, p.wv), p.num_heads)

    kt_axes = tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)
    scores = scale(matmul(qh, permute(kh, kt_axes)), 1.0 / math.sqrt(head_dim))
    mask = causal_mask(nq) if causal else None
    attn = softmax_rows(scores, mask)
    out = matmul(_merge_heads(matmul(attn, vh)), p.wo)
    if return_weights:
        return out, attn.data
    return out
