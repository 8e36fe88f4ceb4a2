"""Central finite-difference verification of analytic gradients.

Each registered check builds a random small instance of one operation,
reduces it to a scalar through a fixed random weighting, and compares the
taped gradient against (f(x+h) - f(x-h)) / 2h coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import MhaParams, Tensor, backward, no_grad

DEFAULT_STEP = 1e-4


def finite_difference_error(build, wiggle, step: float = DEFAULT_STEP,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    ``build`` recomputes the scalar loss from the current ``.data`` of the
    ``wiggle`` tensors.  The denominator is clamped at 1 so near-zero
    gradients are compared absolutely.  ``max_coords`` samples that many
    coordinates per tensor instead of sweeping all of them.
    """
    loss = build()
    for t in wiggle:
        t.grad = None
    backward(loss, params=wiggle)
    analytic = [t.grad.copy() for t in wiggle]

    worst = 0.0
    for t, a in zip(wiggle, analytic):
        flat = t.data.reshape(-1)
        n = flat.shape[0]
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = build().item()
            flat[i] = orig - step
            with no_grad():
                down = build().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            an = a.reshape(-1)[i]
            err = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            worst = max(worst, err)
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape))
    return T.reduce_sum(T.mul(out, w))


def _check_matmul(rng):
    a = _rand(rng, 3, 4)
    b = _rand(rng, 4, 2)
    return lambda: _weighted(T.matmul(a, b), np.random.default_rng(7)), [a, b]


def _check_matmul_batched(rng):
    a = _rand(rng, 2, 3, 3, 4)
    b = _rand(rng, 3, 4, 5)
    return lambda: _weighted(T.matmul(a, b), np.random.default_rng(7)), [a, b]


def _check_add(rng):
    a = _rand(rng, 3, 4)
    b = _rand(rng, 4)
    return lambda: _weighted(T.add(a, b), np.random.default_rng(7)), [a, b]


def _check_sub(rng):
    a = _rand(rng, 2, 5)
    b = _rand(rng, 2, 5)
    return lambda: _weighted(T.sub(a, b), np.random.default_rng(7)), [a, b]


def _check_mul(rng):
    a = _rand(rng, 4, 3)
    b = _rand(rng, 1, 3)
    return lambda: _weighted(T.mul(a, b), np.random.default_rng(7)), [a, b]


def _check_scale(rng):
    a = _rand(rng, 3, 3)
    return lambda: _weighted(T.scale(a, -1.7), np.random.default_rng(7)), [a]


def _check_relu(rng):
    a = _rand(rng, 4, 4)
    a.data[np.abs(a.data) < 0.05] += 0.2  # keep clear of the kink
    return lambda: _weighted(T.relu(a), np.random.default_rng(7)), [a]


def _check_softmax(rng):
    a = _rand(rng, 3, 5)
    return lambda: _weighted(T.softmax_rows(a), np.random.default_rng(7)), [a]


def _check_softmax_masked(rng):
    a = _rand(rng, 4, 4)
    mask = T.causal_mask(4)
    return lambda: _weighted(T.softmax_rows(a, mask), np.random.default_rng(7)), [a]


def _check_layer_norm(rng):
    a = _rand(rng, 3, 5)
    g = _rand(rng, 5)
    b = _rand(rng, 5)
    return lambda: _weighted(T.layer_norm(a, g, b), np.random.default_rng(7)), [a, g, b]


def _check_concat(rng):
    a = _rand(rng, 3, 2)
    b = _rand(rng, 3, 4)
    return lambda: _weighted(T.concat_last(a, b), np.random.default_rng(7)), [a, b]


def _check_stack(rng):
    a = _rand(rng, 2, 3)
    b = _rand(rng, 2, 3)
    return lambda: _weighted(T.stack_rows([a, b]), np.random.default_rng(7)), [a, b]


def _check_mean_pool(rng):
    a = _rand(rng, 2, 4, 3)
    return lambda: _weighted(T.mean_pool_rows(a), np.random.default_rng(7)), [a]


def _check_max_pool(rng):
    a = _rand(rng, 4, 3)
    return lambda: _weighted(T.max_pool_rows(a), np.random.default_rng(7)), [a]


def _check_broadcast_grid(rng):
    v = _rand(rng, 2, 3)
    return lambda: _weighted(T.broadcast_vector_to_grid(v, 4), np.random.default_rng(7)), [v]


def _check_embedding(rng):
    table = _rand(rng, 5, 3)
    ids = rng.integers(0, 5, size=(2, 4))
    return lambda: _weighted(T.embedding_gather(table, ids), np.random.default_rng(7)), [table]


def _check_reduce_sum(rng):
    a = _rand(rng, 3, 4)
    return lambda: _weighted(T.reduce_sum(a, axis=1), np.random.default_rng(7)), [a]


def _check_reduce_mean(rng):
    a = _rand(rng, 3, 4)
    return lambda: T.reduce_mean(a), [a]


def _check_reshape(rng):
    a = _rand(rng, 3, 4)
    return lambda: _weighted(T.reshape(a, (2, 6)), np.random.default_rng(7)), [a]


def _check_permute(rng):
    a = _rand(rng, 2, 3, 4)
    return lambda: _weighted(T.permute(a, (2, 0, 1)), np.random.default_rng(7)), [a]


def _check_l2_normalize(rng):
    a = _rand(rng, 4, 3)
    return lambda: _weighted(T.l2_normalize_rows(a), np.random.default_rng(7)), [a]


def _check_cross_entropy(rng):
    logits = _rand(rng, 4, 5)
    targets = rng.integers(0, 5, size=4)
    mask = np.array([True, True, False, True])
    return lambda: T.cross_entropy_with_logits(logits, targets, mask), [logits]


def _mha_params(rng, d, heads):
    def w():
        return _rand(rng, d, d)

    return MhaParams(heads, w(), w(), w(), w())


def _check_attention(rng):
    d, h = 4, 2
    p = _mha_params(rng, d, h)
    q = _rand(rng, 3, d)
    k = _rand(rng, 5, d)
    v = _rand(rng, 5, d)
    wiggle = [q, k, v, p.wq, p.wk, p.wv, p.wo]
    return lambda: _weighted(T.multi_head_attention(q, k, v, p), np.random.default_rng(7)), wiggle


def _check_attention_causal(rng):
    d, h = 4, 2
    p = _mha_params(rng, d, h)
    x = _rand(rng, 4, d)
    wiggle = [x, p.wq, p.wk, p.wv, p.wo]
    return lambda: _weighted(
        T.multi_head_attention(x, x, x, p, causal=True), np.random.default_rng(7)), wiggle


def _check_token_match(rng):
    from .similarity import token_match_matrix

    qh = _rand(rng, 2, 2, 3, 4)
    kh = _rand(rng, 2, 2, 3, 4)
    return lambda: _weighted(
        token_match_matrix(T.l2_normalize_rows(qh), T.l2_normalize_rows(kh)),
        np.random.default_rng(7)), [qh, kh]


CHECKS = {
    "matmul": _check_matmul,
    "matmul_batched": _check_matmul_batched,
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "scale": _check_scale,
    "relu": _check_relu,
    "softmax_rows": _check_softmax,
    "softmax_rows_masked": _check_softmax_masked,
    "layer_norm": _check_layer_norm,
    "concat_last": _check_concat,
    "stack_rows": _check_stack,
    "mean_pool_rows": _check_mean_pool,
    "max_pool_rows": _check_max_pool,
    "broadcast_vector_to_grid": _check_broadcast_grid,
    "embedding_gather": _check_embedding,
    "reduce_sum": _check_reduce_sum,
    "reduce_mean": _check_reduce_mean,
    "reshape": _check_reshape,
    "permute": _check_permute,
    "l2_normalize_rows": _check_l2_normalize,
    "cross_entropy_with_logits": _check_cross_entropy,
    "multi_head_attention": _check_attention,
    "multi_head_attention_causal": _check_attention_causal,
    "token_match_matrix": _check_token_match,
}


def run_check(name: str, seed: int = 0, step: float = DEFAULT_STEP) -> float:
    build, wiggle = CHECKS[name](np.random.default_rng(seed))
    return finite_difference_error(build, wiggle, step=step)
