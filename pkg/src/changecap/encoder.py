"""Cross-view pair encoding and difference-representation construction.

Raw grid features are projected positionwise and given a learned per-cell
position embedding.  For the reconstruction variants, each view's unchanged
content is rebuilt as a cross-attention mixture of the other view's tokens,
folded back with a residual LayerNorm, and the two views are fused through
a concat + affine + ReLU head into one difference grid.  The subtraction
baseline feeds the plain token difference through the same head so every
variant exposes an identical decoder interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .tensor import MhaParams, Tensor

VARIANTS = ("subtraction", "rr", "scorer")


@dataclass
class FeatureGrid:
    """Position-indexed token matrix for one image view; token i sits at
    grid cell (i // width, i % width)."""

    tokens: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"grid tokens must be (N, D), got {self.tokens.shape}")
        if self.tokens.shape[0] != self.height * self.width:
            raise ValueError(
                f"{self.tokens.shape[0]} tokens cannot tile {self.height}x{self.width}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def width_d(self) -> int:
        return self.tokens.shape[1]

    def cell_of(self, index: int) -> tuple[int, int]:
        return divmod(index, self.width)


@dataclass
class ReconstructionBlock:
    """One cross-attention layer with its residual LayerNorm, shared between
    the two view directions."""

    attn: MhaParams
    ln_gamma: Tensor
    ln_beta: Tensor

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln_gamma", self.ln_gamma
        yield f"{prefix}.ln_beta", self.ln_beta


@dataclass
class EncoderParams:
    height: int
    width: int
    proj: Tensor                 # (d_in, D) positionwise input projection
    pos: Tensor                  # (N, D) learned position table, shared by both views
    blocks: list[ReconstructionBlock] = field(default_factory=list)
    diff_w: Tensor = None        # (2D, D) fusion of the two refined views
    diff_b: Tensor = None        # (D,)

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def named(self, prefix: str = "encoder"):
        yield f"{prefix}.proj", self.proj
        yield f"{prefix}.pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")
        yield f"{prefix}.diff_w", self.diff_w
        yield f"{prefix}.diff_b", self.diff_b


def project_tokens(raw: Tensor, p: EncoderParams) -> Tensor:
    """raw (..., N, d_in) -> (..., N, D): linear map plus position table."""
    if raw.shape[-2] != p.num_tokens:
        raise ValueError(f"expected {p.num_tokens} tokens, got {raw.shape[-2]}")
    if raw.shape[-1] != p.proj.shape[0]:
        raise ValueError(f"raw width {raw.shape[-1]} does not match projection {p.proj.shape}")
    return T.add(T.matmul(raw, p.proj), p.pos)


def project_grid(raw: Tensor, p: EncoderParams) -> FeatureGrid:
    if raw.ndim != 2:
        raise ValueError("project_grid takes a single (N, d_in) view")
    return FeatureGrid(project_tokens(raw, p), p.height, p.width)


def reconstruct_unchanged(a: FeatureGrid, b: FeatureGrid, attn: MhaParams) -> FeatureGrid:
    """Rebuild each token of ``a`` as an attention mixture of ``b``'s tokens."""
    if a.tokens.shape[-1] != b.tokens.shape[-1]:
        raise ValueError("views must share token width")
    out = T.multi_head_attention(a.tokens, b.tokens, b.tokens, attn)
    return FeatureGrid(out, a.height, a.width)


def fuse_unchanged(x: FeatureGrid, xu: FeatureGrid, gamma: Tensor, beta: Tensor) -> FeatureGrid:
    """Fold the reconstructed content back into the view: LN(x + xu)."""
    if x.tokens.shape != xu.tokens.shape:
        raise ValueError("grid shapes disagree")
    return FeatureGrid(T.layer_norm(T.add(x.tokens, xu.tokens), gamma, beta), x.height, x.width)


def difference_representation(bc: FeatureGrid, ac: FeatureGrid,
                              w: Tensor, b: Tensor) -> FeatureGrid:
    """Per-token concat of the two refined views, affine map, ReLU."""
    if bc.tokens.shape != ac.tokens.shape:
        raise ValueError("grid shapes disagree")
    out = T.relu(T.add(T.matmul(T.concat_last(bc.tokens, ac.tokens), w), b))
    return FeatureGrid(out, bc.height, bc.width)


def _reconstruction_step(xb: Tensor, xa: Tensor, blk: ReconstructionBlock):
    ub = T.multi_head_attention(xb, xa, xa, blk.attn)
    ua = T.multi_head_attention(xa, xb, xb, blk.attn)
    cb = T.layer_norm(T.add(xb, ub), blk.ln_gamma, blk.ln_beta)
    ca = T.layer_norm(T.add(xa, ua), blk.ln_gamma, blk.ln_beta)
    return cb, ca


def encode_pair_tokens(raw_b: Tensor, raw_a: Tensor, p: EncoderParams,
                       variant: str) -> tuple[Tensor, Tensor, Tensor]:
    """Batched core of encode_pair on (..., N, d_in) raw views.

    Returns (difference tokens, projected before, projected after); the
    projected views feed the alignment loss and the backward-reasoning path.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    xb = project_tokens(raw_b, p)
    xa = project_tokens(raw_a, p)
    if variant == "subtraction":
        d = T.sub(xa, xb)
        fused = T.concat_last(d, d)
    else:
        if not p.blocks:
            raise ValueError("reconstruction variants need at least one block")
        cb, ca = xb, xa
        for blk in p.blocks:
            cb, ca = _reconstruction_step(cb, ca, blk)
        fused = T.concat_last(cb, ca)
    diff = T.relu(T.add(T.matmul(fused, p.diff_w), p.diff_b))
    return diff, xb, xa


def encode_pair(raw_b: Tensor, raw_a: Tensor, p: EncoderParams,
                variant: str) -> tuple[FeatureGrid, FeatureGrid, FeatureGrid]:
    """Single-pair wrapper returning grids for the difference and both views."""
    if raw_b.ndim != 2 or raw_a.ndim != 2:
        raise ValueError("encode_pair takes (N, d_in) views; use encode_pair_tokens for batches")
    diff, xb, xa = encode_pair_tokens(raw_b, raw_a, p, variant)
    return (FeatureGrid(diff, p.height, p.width),
            FeatureGrid(xb, p.height, p.width),
            FeatureGrid(xa, p.height, p.width))
