"""Transformer caption decoder over the difference grid.

Word ids embed, project to model width, and pass through post-LN decoder
layers: causal self-attention, cross-attention into the difference tokens,
then a position-wise feed-forward, each with a residual.  The final states
map through a linear head to vocabulary logits.  Inference is greedy with
lowest-id tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import MhaParams, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Bijection between caption words and ids above the reserved block."""

    def __init__(self, words):
        self.id_to_word = list(RESERVED) + list(words)
        if len(set(self.id_to_word)) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode_words(self, words) -> list[int]:
        return [self.word_to_id.get(w, UNK) for w in words]

    def decode_ids(self, ids) -> list[str]:
        return [self.id_to_word[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for w in self.id_to_word[len(RESERVED):]:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(words)


@dataclass
class CaptionSeq:
    """Token ids from BOS to EOS inclusive; dataset captions carry no PAD
    inside, model output may (strict=False skips that check)."""

    ids: list[int]
    strict: bool = True

    def __post_init__(self):
        ids = list(self.ids)
        if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
            raise ValueError("caption must run from BOS to EOS")
        if self.strict and PAD in ids[1:-1]:
            raise ValueError("PAD inside a caption")
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_words(cls, vocab: Vocabulary, words) -> "CaptionSeq":
        return cls([BOS] + vocab.encode_words(words) + [EOS])

    def words(self, vocab: Vocabulary) -> list[str]:
        return vocab.decode_ids(self.ids[1:-1])


@dataclass
class DecoderLayer:
    self_attn: MhaParams
    cross_attn: MhaParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ln3_gamma: Tensor
    ln3_beta: Tensor
    ffn_w1: Tensor     # (D, 4D)
    ffn_b1: Tensor
    ffn_w2: Tensor     # (4D, D)
    ffn_b2: Tensor

    def named(self, prefix: str):
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.cross_attn.named(f"{prefix}.cross_attn")
        for key in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                    "ln3_gamma", "ln3_beta", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class DecoderParams:
    embed: Tensor        # (U, d_embed) word embedding table
    embed_proj: Tensor   # (d_embed, D) bridge into model width
    layers: list[DecoderLayer] = field(default_factory=list)
    out_w: Tensor = None  # (D, U)
    out_b: Tensor = None  # (U,)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def named(self, prefix: str = "decoder"):
        yield f"{prefix}.embed", self.embed
        yield f"{prefix}.embed_proj", self.embed_proj
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def decode_states(diff_tokens: Tensor, input_ids: np.ndarray, p: DecoderParams,
                  record_attention: bool = False):
    """Run the decoder stack on already shifted input ids.

    diff_tokens is (..., N, D) and input_ids (..., m); returns
    (logits, states) with shapes (..., m, U) and (..., m, D).  With
    ``record_attention`` the last layer's cross-attention weights
    (..., heads, m, N) come back as a third element.
    """
    input_ids = np.asarray(input_ids)
    x = T.matmul(T.embedding_gather(p.embed, input_ids), p.embed_proj)
    attn_weights = None
    for layer in p.layers:
        sa = T.multi_head_attention(x, x, x, layer.self_attn, causal=True)
        x = T.layer_norm(T.add(x, sa), layer.ln1_gamma, layer.ln1_beta)
        if record_attention and layer is p.layers[-1]:
            ca, attn_weights = T.multi_head_attention(
                x, diff_tokens, diff_tokens, layer.cross_attn, return_weights=True)
        else:
            ca = T.multi_head_attention(x, diff_tokens, diff_tokens, layer.cross_attn)
        x = T.layer_norm(T.add(x, ca), layer.ln2_gamma, layer.ln2_beta)
        ff = T.add(T.matmul(T.relu(T.add(T.matmul(x, layer.ffn_w1), layer.ffn_b1)),
                            layer.ffn_w2), layer.ffn_b2)
        x = T.layer_norm(T.add(x, ff), layer.ln3_gamma, layer.ln3_beta)
    logits = T.add(T.matmul(x, p.out_w), p.out_b)
    if record_attention:
        return logits, x, attn_weights
    return logits, x


def decode_teacher_forced(diff, caption: CaptionSeq, p: DecoderParams,
                          max_len: int | None = None):
    """Teacher forcing for one caption: feed BOS..w_{m-1}, predict w_1..EOS.

    Returns per-step logits (m, U) and the pre-head states (m, D).
    """
    tokens = diff.tokens if hasattr(diff, "tokens") else diff
    if max_len is not None and len(caption) > max_len:
        raise ValueError(f"caption of {len(caption)} tokens exceeds limit {max_len}")
    if max(caption.ids) >= p.vocab_size:
        raise ValueError("caption id outside vocabulary")
    input_ids = np.asarray(caption.ids[:-1])
    return decode_states(tokens, input_ids, p)


def greedy_decode(diff, p: DecoderParams, max_len: int,
                  record_attention: bool = False):
    """Greedy inference from BOS; stops at EOS or after max_len tokens.

    Ties pick the lowest token id.  With ``record_attention``, also returns
    one (heads, N) cross-attention map per generated word.
    """
    tokens = diff.tokens if hasattr(diff, "tokens") else diff
    ids = [BOS]
    maps = []
    with T.no_grad():
        while len(ids) < max_len - 1:
            out = decode_states(tokens, np.asarray(ids), p, record_attention=record_attention)
            if record_attention:
                logits, _, attn = out
                maps.append(attn[..., -1, :].copy())
            else:
                logits, _ = out
            ids.append(int(np.argmax(logits.data[-1])))
            if ids[-1] == EOS:
                break
    if ids[-1] != EOS:
        ids.append(EOS)
    seq = CaptionSeq(ids, strict=False)
    if record_attention:
        return seq, maps
    return seq


def caption_nll(logits: Tensor, caption: CaptionSeq) -> Tensor:
    """Mean negative log-likelihood of the caption's target tokens."""
    targets = np.asarray(caption.ids[1:])
    if logits.shape[-2] != targets.shape[0]:
        raise ValueError(f"{logits.shape[-2]} steps vs {targets.shape[0]} targets")
    mask = targets != PAD
    return T.cross_entropy_with_logits(logits, targets, mask)
