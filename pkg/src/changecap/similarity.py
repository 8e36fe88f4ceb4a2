"""Token-wise matching between feature grids and the contrastive losses on top.

A pair score is the symmetric average of per-token best matches: for the
cross-product of token sets, every query token keeps its best dot product
against the other side, both directions are averaged.  The multi-head form
projects tokens into subspaces first and averages the per-head scores.
Scores feed a bidirectional temperature-scaled InfoNCE over in-batch
negatives, or a positives-only squared-distance variant.

Reduction order note: the per-token maxima are summed in ascending value
order (sorted before summation), which makes scores bit-exactly invariant
to token permutation and to swapping the two sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIM_MODES = ("mtm", "tm", "mean-pool", "max-pool")
LOSS_MODES = ("infonce", "l2")

# instrumentation: how many times the matching kernel / InfoNCE ran
KERNEL_CALLS = 0
INFO_NCE_CALLS = 0


def reset_instrumentation() -> None:
    global KERNEL_CALLS, INFO_NCE_CALLS
    KERNEL_CALLS = 0
    INFO_NCE_CALLS = 0


@dataclass
class MtmParams:
    """Per-head query/key projections, stacked as (heads, D, D/heads)."""

    wq: Tensor
    wk: Tensor

    def __post_init__(self):
        if self.wq.ndim != 3 or self.wq.shape != self.wk.shape:
            raise ValueError("head projections must be (heads, D, head_dim) and match")

    @property
    def num_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return self.wq.shape[1]

    def named(self, prefix: str):
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk


@dataclass
class AlignmentConfig:
    temperature: float = 0.1
    sim_mode: str = "mtm"
    loss_mode: str = "infonce"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sim_mode not in SIM_MODES:
            raise ValueError(f"sim_mode must be one of {SIM_MODES}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class SimilarityMatrix:
    """B x B pair scores; rows index queries, columns key items, (k, k) is
    the positive pair."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {self.values.shape}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]


def token_match_matrix(qh: Tensor, kh: Tensor) -> Tensor:
    """All-pairs token-match scores for head-split token sets.

    qh is (Bq, h, Nq, hd) and kh is (Bk, h, Nk, hd), tokens already unit
    length.  Entry (k, r) averages over heads the two-way mean of per-token
    maxima between item k of qh and item r of kh.
    """
    global KERNEL_CALLS
    KERNEL_CALLS += 1
    if qh.ndim != 4 or kh.ndim != 4:
        raise ValueError("token_match_matrix expects (B, heads, N, head_dim) inputs")
    bq, h, nq, hd = qh.shape
    bk, h2, nk, hd2 = kh.shape
    if h != h2 or hd != hd2:
        raise ValueError(f"head layout mismatch: {qh.shape} vs {kh.shape}")

    # one (nq, hd) @ (hd, nk) gemm per item pair and head: the inner gemm
    # shape is independent of the batch extents, so single-pair calls
    # reproduce batch entries bit for bit
    e = np.matmul(qh.data[:, None], kh.data.transpose(0, 1, 3, 2)[None])
    # e: (bq, bk, h, nq, nk)

    row_arg = e.argmax(axis=-1)                      # (bq, bk, h, nq)
    row_max = np.take_along_axis(e, row_arg[..., None], axis=-1)[..., 0]
    col_arg = e.argmax(axis=-2)                      # (bq, bk, h, nk)
    col_max = np.take_along_axis(e, col_arg[..., None, :], axis=-2)[..., 0, :]

    # contiguous last-axis reductions in sorted order: the bits depend on the
    # value multiset and (N, heads) alone, never on batch size or token order
    row_term = np.sort(row_max, axis=-1).sum(axis=-1) / nq   # (bq, bk, h)
    col_term = np.sort(col_max, axis=-1).sum(axis=-1) / nk
    scores = ((row_term + col_term) / 2.0).mean(axis=-1)

    def grad_fn(g):
        row_val = np.broadcast_to((g / (2.0 * h * nq))[..., None, None], row_arg.shape)
        col_val = np.broadcast_to((g / (2.0 * h * nk))[..., None, None], col_arg.shape)
        de = np.zeros(e.shape)
        np.put_along_axis(de, row_arg[..., None], row_val[..., None], axis=-1)
        # a column route can land where a row route already wrote; read-add-write
        # keeps both contributions (routes never collide among themselves)
        col_idx = col_arg[..., None, :]
        cur = np.take_along_axis(de, col_idx, axis=-2)
        np.put_along_axis(de, col_idx, cur + col_val[..., None, :], axis=-2)
        de2 = np.ascontiguousarray(de.transpose(2, 0, 3, 1, 4)).reshape(h, bq * nq, bk * nk)
        q2 = np.ascontiguousarray(qh.data.transpose(1, 0, 2, 3)).reshape(h, bq * nq, hd)
        k2 = np.ascontiguousarray(kh.data.transpose(1, 0, 2, 3)).reshape(h, bk * nk, hd)
        gq = np.matmul(de2, k2).reshape(h, bq, nq, hd).transpose(1, 0, 2, 3)
        gk = np.matmul(de2.transpose(0, 2, 1), q2).reshape(h, bk, nk, hd).transpose(1, 0, 2, 3)
        return gq, gk

    return T._make(scores, (qh, kh), grad_fn, "token_match_matrix")


def _as_stacked(grids) -> Tensor:
    """Accept a (B, N, D) tensor or a sequence of grids/tensors."""
    if isinstance(grids, Tensor):
        if grids.ndim != 3:
            raise ValueError(f"stacked grids must be (B, N, D), got {grids.shape}")
        return grids
    items = [g.tokens if hasattr(g, "tokens") else g for g in grids]
    return T.stack_rows(items)


def _head_tokens(stacked: Tensor, w: Tensor | None = None) -> Tensor:
    """Project (B, N, D) into unit-length (B, heads, N, head_dim) tokens.

    Without projections this is the single-head view of the raw tokens.
    """
    b, n, d = stacked.shape
    if w is None:
        lifted = T.reshape(stacked, (b, 1, n, d))
    else:
        lifted = T.matmul(T.reshape(stacked, (b, 1, n, d)), w)
    return T.l2_normalize_rows(lifted)


def tm_similarity(q: Tensor, k: Tensor) -> Tensor:
    """Symmetric token-match score of two (N, d) token sets.

    Tokens must be L2-normalized by the caller.  Computed from a single
    token-dot matrix, so swapping the arguments gives the identical scalar.
    """
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError("tm_similarity expects (N, d) token matrices")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"token width mismatch: {q.shape} vs {k.shape}")
    if q.shape[0] < 1 or k.shape[0] < 1:
        raise ValueError("need at least one token per side")
    qh = T.reshape(q, (1, 1) + q.shape)
    kh = T.reshape(k, (1, 1) + k.shape)
    return T.reshape(token_match_matrix(qh, kh), ())


def mtm_similarity(q: Tensor, k: Tensor, p: MtmParams) -> Tensor:
    """Multi-head token-match score; heads are reduced by arithmetic mean."""
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError("mtm_similarity expects (N, D) token matrices")
    if q.shape[-1] != p.width or k.shape[-1] != p.width:
        raise ValueError(f"token width {q.shape[-1]} incompatible with projections {p.wq.shape}")
    qh = _head_tokens(T.reshape(q, (1,) + q.shape), p.wq)
    kh = _head_tokens(T.reshape(k, (1,) + k.shape), p.wk)
    return T.reshape(token_match_matrix(qh, kh), ())


def _pooled_features(stacked: Tensor, mode: str) -> Tensor:
    pooled = T.mean_pool_rows(stacked) if mode == "mean-pool" else T.max_pool_rows(stacked)
    return T.l2_normalize_rows(pooled)


def _pooled_scores(u: Tensor, v: Tensor) -> Tensor:
    """(Bq, D) x (Bk, D) -> (Bq, Bk) dots via a last-axis reduction, so the
    summation grouping matches the single-pair path bit for bit."""
    bq, d = u.shape
    bk = v.shape[0]
    prod = T.mul(T.reshape(u, (bq, 1, d)), T.reshape(v, (1, bk, d)))
    return T.reduce_sum(prod, axis=-1)


def pooled_similarity(q: Tensor, k: Tensor, mode: str) -> Tensor:
    """Global-feature ablation: pool tokens, normalize, dot product.

    A grid whose pooled feature is the zero vector scores 0 against anything.
    """
    if mode not in ("mean-pool", "max-pool"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if q.ndim != 2 or k.ndim != 2 or q.shape[-1] != k.shape[-1]:
        raise ValueError("pooled_similarity expects matching (N, d) token matrices")
    u = _pooled_features(T.reshape(q, (1,) + q.shape), mode)
    v = _pooled_features(T.reshape(k, (1,) + k.shape), mode)
    return T.reshape(_pooled_scores(u, v), ())


def batch_similarity(befores, afters, cfg: AlignmentConfig,
                     p: MtmParams | None = None) -> SimilarityMatrix:
    """All-pairs score matrix between two equally sized batches of grids."""
    qs = _as_stacked(befores)
    ks = _as_stacked(afters)
    if qs.shape[0] != ks.shape[0]:
        raise ValueError(f"batch sizes disagree: {qs.shape[0]} vs {ks.shape[0]}")
    if qs.shape[1:] != ks.shape[1:]:
        raise ValueError(f"grid shapes disagree: {qs.shape} vs {ks.shape}")
    if cfg.sim_mode == "mtm":
        if p is None:
            raise ValueError("mtm mode needs projection parameters")
        values = token_match_matrix(_head_tokens(qs, p.wq), _head_tokens(ks, p.wk))
    elif cfg.sim_mode == "tm":
        values = token_match_matrix(_head_tokens(qs), _head_tokens(ks))
    else:
        u = _pooled_features(qs, cfg.sim_mode)
        v = _pooled_features(ks, cfg.sim_mode)
        values = _pooled_scores(u, v)
    return SimilarityMatrix(values)


def info_nce_bidirectional(s: SimilarityMatrix | Tensor, tau: float) -> Tensor:
    """Bidirectional InfoNCE: mean diagonal NLL of the row softmax at
    temperature tau, averaged with the column direction, halved."""
    global INFO_NCE_CALLS
    INFO_NCE_CALLS += 1
    values = s.values if isinstance(s, SimilarityMatrix) else s
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"expected a square score matrix, got {values.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = values.shape[0]
    diag = np.arange(b)
    fwd = T.cross_entropy_with_logits(T.scale(values, 1.0 / tau), diag)
    bwd = T.cross_entropy_with_logits(T.scale(T.transpose2d(values), 1.0 / tau), diag)
    return T.scale(T.add(fwd, bwd), 0.5)


def l2_alignment(befores, afters) -> Tensor:
    """Positives-only variant: mean squared distance between the mean-pooled
    features of paired grids.  Negatives are ignored."""
    qs = _as_stacked(befores)
    ks = _as_stacked(afters)
    if qs.shape != ks.shape:
        raise ValueError(f"paired batches must match: {qs.shape} vs {ks.shape}")
    d = T.sub(T.mean_pool_rows(qs), T.mean_pool_rows(ks))
    return T.reduce_mean(T.reduce_sum(T.mul(d, d), axis=-1))


def alignment_loss(befores, afters, cfg: AlignmentConfig,
                   p: MtmParams | None = None) -> Tensor:
    """Dispatch on cfg.loss_mode: contrastive InfoNCE or paired L2."""
    if cfg.loss_mode == "l2":
        return l2_alignment(befores, afters)
    return info_nce_bidirectional(batch_similarity(befores, afters, cfg, p), cfg.temperature)
