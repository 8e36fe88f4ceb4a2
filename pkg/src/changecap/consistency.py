"""Caption-to-image consistency via an imagined "after" view.

The decoder's states collapse into one caption vector, which is broadcast
over the "before" grid and fused positionwise into a synthesized grid of
what the scene should look like after the described change.  Self-attention
plus an output projection refine it, and a contrastive loss pushes it
toward the true "after" grid against in-batch negatives.  The gradient path
through the caption vector supervises the decoder itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .similarity import AlignmentConfig, MtmParams, batch_similarity, info_nce_bidirectional
from .tensor import MhaParams, Tensor


@dataclass
class ConsistencyParams:
    fuse_w: Tensor      # (2D, D) positionwise fusion of view token and caption vector
    attn: MhaParams     # self-attention over the synthesized grid
    out_w: Tensor       # (D, D) output projection after refinement
    match: MtmParams    # dedicated matching heads, separate from the encoder's

    def named(self, prefix: str = "consistency"):
        yield f"{prefix}.fuse_w", self.fuse_w
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.out_w", self.out_w
        yield from self.match.named(f"{prefix}.match")


def caption_feature(states: Tensor, mask=None) -> Tensor:
    """Collapse decoder states (..., m, D) to one vector by mean pooling.

    ``mask`` (..., m) marks real steps when sequences are padded; the mean
    then runs over real steps only.
    """
    if states.shape[-2] < 1:
        raise ValueError("need at least one decoder state")
    if mask is None:
        return T.mean_pool_rows(states)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("masked sequence with no real steps")
    weighted = T.mul(states, T.constant(mask[..., None]))
    return T.mul(T.reduce_sum(weighted, axis=-2), T.constant(1.0 / counts[..., None]))


def imagine_after(bef_tokens: Tensor, caption_vec: Tensor, p: ConsistencyParams) -> Tensor:
    """Broadcast the caption vector across the before grid and fuse per token."""
    n = bef_tokens.shape[-2]
    if caption_vec.shape[-1] != bef_tokens.shape[-1]:
        raise ValueError("caption vector width must match token width")
    tiled = T.broadcast_vector_to_grid(caption_vec, n)
    return T.matmul(T.concat_last(bef_tokens, tiled), p.fuse_w)


def refine_imagined(x: Tensor, p: ConsistencyParams) -> Tensor:
    """Self-attention over the synthesized grid, then the output projection."""
    return T.matmul(T.multi_head_attention(x, x, x, p.attn), p.out_w)


def imagined_after_tokens(bef_tokens: Tensor, states: Tensor, p: ConsistencyParams,
                          state_mask=None) -> Tensor:
    """Full synthesis path: caption vector, fuse into the before grid, refine."""
    vec = caption_feature(states, state_mask)
    return refine_imagined(imagine_after(bef_tokens, vec, p), p)


def consistency_loss(imagined, afters, cfg: AlignmentConfig, p: ConsistencyParams) -> Tensor:
    """Bidirectional InfoNCE between synthesized and true after grids."""
    return info_nce_bidirectional(
        batch_similarity(imagined, afters, cfg, p.match), cfg.temperature)
