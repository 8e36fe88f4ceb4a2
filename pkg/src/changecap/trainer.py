"""Joint training loop: variant gating, batch assembly with in-batch
negatives, Adam optimization, loss logging, and checkpoint persistence.

Five variants share one decoder interface: plain subtraction, vanilla
reconstruction (rr), reconstruction with cross-view contrastive alignment
(scorer), and the two "+cbr" forms that add the caption-consistency loss.
Inactive loss terms are never computed, not just zero-weighted.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .changeworld import (MATERIALS, SHAPES, COLORS, RenderSpec, ScenePair,
                          attrs_to_features, build_vocabulary, cells_to_attrs)
from .consistency import ConsistencyParams, consistency_loss, imagined_after_tokens
from .decoder import PAD, BOS, EOS, DecoderLayer, DecoderParams, Vocabulary, decode_states
from .encoder import EncoderParams, ReconstructionBlock, encode_pair_tokens
from .optim import AdamState, adam_step, zero_grad
from .similarity import AlignmentConfig, MtmParams, alignment_loss
from .tensor import MhaParams, NonFiniteError, Tensor

TRAIN_VARIANTS = ("subtraction", "rr", "scorer", "rr+cbr", "scorer+cbr")

CHECKPOINT_MAGIC = b"SCORERCKPT1"


class TrainingDiverged(RuntimeError):
    """The loss went non-finite; the run is aborted."""


class CheckpointError(ValueError):
    """A checkpoint failed to load against the expected parameter tree."""


@dataclass
class TrainConfig:
    variant: str = "scorer+cbr"
    height: int = 4
    width: int = 4
    d_in: int = 32
    d_model: int = 64
    d_embed: int = 64
    enc_layers: int = 1
    enc_heads: int = 4
    mtm_heads: int = 2
    dec_layers: int = 1
    dec_heads: int = 4
    cbr_heads: int = 2
    lambda_v: float = 0.1
    lambda_m: float = 0.01
    temperature: float = 0.1
    sim_mode: str = "mtm"
    loss_mode: str = "infonce"
    lr: float = 1e-3
    batch_size: int = 32
    iterations: int = 3000
    seed: int = 0
    max_caption_len: int = 16
    sigma: float = 0.05
    render_seed: int = 0
    checkpoint_interval: int = 0
    augment: bool = True
    weight_decay: float = 0.0

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    @property
    def uses_cross_view(self) -> bool:
        return self.variant in ("scorer", "scorer+cbr") and self.lambda_v > 0

    @property
    def uses_consistency(self) -> bool:
        return self.variant.endswith("+cbr") and self.lambda_m > 0

    @property
    def encode_variant(self) -> str:
        return "subtraction" if self.variant == "subtraction" else "scorer"

    def resolved(self) -> "TrainConfig":
        """Apply variant gating and validate the result."""
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {TRAIN_VARIANTS}")
        cfg = replace(self)
        if cfg.variant.split("+")[0] in ("subtraction", "rr"):
            cfg.lambda_v = 0.0
        if not cfg.variant.endswith("+cbr"):
            cfg.lambda_m = 0.0
        if cfg.d_model % cfg.enc_heads or cfg.d_model % cfg.mtm_heads \
                or cfg.d_model % cfg.dec_heads or cfg.d_model % cfg.cbr_heads:
            raise ValueError("d_model must divide by every head count")
        if (cfg.uses_cross_view or cfg.uses_consistency) and cfg.batch_size < 2:
            raise ValueError("contrastive losses need batch_size >= 2")
        if cfg.lambda_v < 0 or cfg.lambda_m < 0 or cfg.temperature <= 0:
            raise ValueError("loss weights must be non-negative and temperature positive")
        if cfg.variant != "subtraction" and cfg.enc_layers < 1:
            raise ValueError("reconstruction variants need enc_layers >= 1")
        return cfg

    def alignment_config(self) -> AlignmentConfig:
        return AlignmentConfig(self.temperature, self.sim_mode, self.loss_mode)


# recorded large-scale presets; desk is the default configuration above
PRESETS: dict[str, dict] = {
    "desk": {},
    "clevr-change": dict(d_in=1024, d_model=512, d_embed=300, height=14, width=14,
                         enc_layers=2, enc_heads=8, mtm_heads=8, dec_layers=2, dec_heads=8,
                         cbr_heads=8, lambda_v=0.1, lambda_m=0.001, batch_size=128,
                         lr=2e-4, iterations=10000),
    "clevr-dc": dict(d_in=1024, d_model=512, d_embed=300, height=14, width=14,
                     enc_layers=1, enc_heads=8, mtm_heads=8, dec_layers=2, dec_heads=8,
                     cbr_heads=8, lambda_v=0.01, lambda_m=0.004, batch_size=128,
                     lr=2e-4, iterations=10000),
    "spot-the-diff": dict(d_in=1024, d_model=512, d_embed=300, height=14, width=14,
                          enc_layers=3, enc_heads=8, mtm_heads=8, dec_layers=2, dec_heads=8,
                          cbr_heads=8, lambda_v=0.3, lambda_m=0.5, batch_size=32,
                          lr=2e-4, iterations=10000),
    "image-editing": dict(d_in=1024, d_model=512, d_embed=300, height=14, width=14,
                          enc_layers=2, enc_heads=8, mtm_heads=8, dec_layers=2, dec_heads=8,
                          cbr_heads=8, lambda_v=0.003, lambda_m=0.06, batch_size=16,
                          lr=1e-4, iterations=10000),
}


@dataclass
class ModelParams:
    encoder: EncoderParams
    match: MtmParams
    decoder: DecoderParams
    consistency: ConsistencyParams

    def named(self):
        yield from self.encoder.named("encoder")
        yield from self.match.named("match")
        yield from self.decoder.named("decoder")
        yield from self.consistency.named("consistency")

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named())


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _table(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)


def _init_mha(rng, d: int, heads: int) -> MhaParams:
    return MhaParams(
        num_heads=heads,
        wq=_uniform(rng, d, (d, d)), wk=_uniform(rng, d, (d, d)),
        wv=_uniform(rng, d, (d, d)), wo=_uniform(rng, d, (d, d)),
    )


def _init_match(rng, d: int, heads: int) -> MtmParams:
    hd = d // heads
    return MtmParams(wq=_uniform(rng, d, (heads, d, hd)), wk=_uniform(rng, d, (heads, d, hd)))


def init_params(cfg: TrainConfig, seed: int | None = None) -> ModelParams:
    """Fan-in uniform weights, zero biases, unit LN gains, N(0, 0.02) tables."""
    cfg = cfg.resolved()
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    d, n = cfg.d_model, cfg.num_tokens
    u = len(build_vocabulary())

    blocks = [
        ReconstructionBlock(_init_mha(rng, d, cfg.enc_heads), _ones(d), _zeros(d))
        for _ in range(cfg.enc_layers)
    ]
    encoder = EncoderParams(
        height=cfg.height, width=cfg.width,
        proj=_uniform(rng, cfg.d_in, (cfg.d_in, d)), pos=_table(rng, (n, d)),
        blocks=blocks, diff_w=_uniform(rng, 2 * d, (2 * d, d)), diff_b=_zeros(d),
    )
    match = _init_match(rng, d, cfg.mtm_heads)
    layers = [
        DecoderLayer(
            self_attn=_init_mha(rng, d, cfg.dec_heads),
            cross_attn=_init_mha(rng, d, cfg.dec_heads),
            ln1_gamma=_ones(d), ln1_beta=_zeros(d),
            ln2_gamma=_ones(d), ln2_beta=_zeros(d),
            ln3_gamma=_ones(d), ln3_beta=_zeros(d),
            ffn_w1=_uniform(rng, d, (d, 4 * d)), ffn_b1=_zeros(4 * d),
            ffn_w2=_uniform(rng, 4 * d, (4 * d, d)), ffn_b2=_zeros(d),
        )
        for _ in range(cfg.dec_layers)
    ]
    decoder = DecoderParams(
        embed=_table(rng, (u, cfg.d_embed)),
        embed_proj=_uniform(rng, cfg.d_embed, (cfg.d_embed, d)),
        layers=layers, out_w=_uniform(rng, d, (d, u)), out_b=_zeros(u),
    )
    consistency = ConsistencyParams(
        fuse_w=_uniform(rng, 2 * d, (2 * d, d)),
        attn=_init_mha(rng, d, cfg.cbr_heads),
        out_w=_uniform(rng, d, (d, d)),
        match=_init_match(rng, d, cfg.cbr_heads),
    )
    return ModelParams(encoder, match, decoder, consistency)


@dataclass
class DatasetArrays:
    """Symbolic cell attributes and padded caption ids for fast batching.

    Features are composed per iteration so the trainer can exploit the
    world's symmetries as augmentation: a coherent cyclic shift of both
    views, a consistent permutation of each attribute family (with the
    caption words remapped to match), and fresh view noise.  Held-out
    evaluation always uses the canonical per-pair renders instead.
    """

    height: int
    width: int
    before_attrs: np.ndarray  # (n, N, 3) int8; -1 marks empty cells
    after_attrs: np.ndarray   # (n, N, 3)
    inputs: np.ndarray        # (n, S) BOS..w_{m-1}, PAD-padded
    targets: np.ndarray       # (n, S) w_1..EOS, PAD-padded
    target_mask: np.ndarray   # (n, S) True on real steps

    @property
    def size(self) -> int:
        return self.before_attrs.shape[0]


def prepare_arrays(pairs: list[ScenePair], vocab: Vocabulary,
                   max_caption_len: int) -> DatasetArrays:
    if not pairs:
        raise ValueError("dataset is empty")
    befores, afters, seqs = [], [], []
    height, width = pairs[0].height, pairs[0].width
    for pair in pairs:
        if (pair.height, pair.width) != (height, width):
            raise ValueError("all pairs in a dataset must share grid dims")
        befores.append(cells_to_attrs(pair.before))
        afters.append(cells_to_attrs(pair.after))
        ids = [BOS] + vocab.encode_words(pair.caption) + [EOS]
        if len(ids) > max_caption_len:
            raise ValueError(f"pair {pair.pair_id}: caption longer than {max_caption_len}")
        seqs.append(ids)
    longest = max(len(s) for s in seqs)
    padded = np.full((len(seqs), longest), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        padded[i, : len(s)] = s
    targets = padded[:, 1:]
    return DatasetArrays(
        height=height, width=width,
        before_attrs=np.stack(befores), after_attrs=np.stack(afters),
        inputs=padded[:, :-1], targets=targets, target_mask=targets != PAD,
    )


def _attr_word_bases(vocab: Vocabulary) -> tuple[int, int, int]:
    """Vocabulary ids of the first shape/color/material word; each family
    occupies a contiguous id block by construction."""
    bases = []
    for family in (SHAPES, COLORS, MATERIALS):
        base = vocab.word_to_id[family[0]]
        for off, word in enumerate(family):
            if vocab.word_to_id[word] != base + off:
                raise ValueError("attribute words must be contiguous in the vocabulary")
        bases.append(base)
    return tuple(bases)


class BatchComposer:
    """Turns sampled dataset rows into model-ready arrays, optionally
    applying the symmetry augmentations."""

    def __init__(self, data: DatasetArrays, spec: RenderSpec, vocab: Vocabulary,
                 cfg: "TrainConfig"):
        self.data = data
        self.spec = spec
        self.cfg = cfg
        self.families = (SHAPES, COLORS, MATERIALS)
        self.bases = _attr_word_bases(vocab)
        self.vocab_size = len(vocab)
        n = data.height * data.width
        rows, cols = np.divmod(np.arange(n), data.width)
        self._rows, self._cols = rows, cols

    def _shift_sources(self, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
        rows = (self._rows[None, :] - dy[:, None]) % self.data.height
        cols = (self._cols[None, :] - dx[:, None]) % self.data.width
        return rows * self.data.width + cols

    def compose(self, idx: np.ndarray, rng: np.random.Generator | None):
        """Features and captions for rows ``idx``; ``rng`` enables the
        augmentations (None gives plain noise-free renders)."""
        data, spec, cfg = self.data, self.spec, self.cfg
        attrs_b = data.before_attrs[idx]
        attrs_a = data.after_attrs[idx]
        inputs = data.inputs[idx]
        targets = data.targets[idx]
        if rng is None or not cfg.augment:
            feats_b = attrs_to_features(attrs_b, spec)
            feats_a = attrs_to_features(attrs_a, spec)
            if rng is not None and cfg.sigma > 0:
                feats_b = feats_b + cfg.sigma * rng.standard_normal(feats_b.shape)
                feats_a = feats_a + cfg.sigma * rng.standard_normal(feats_a.shape)
            return feats_b, feats_a, inputs, targets, data.target_mask[idx]

        b = attrs_b.shape[0]
        item = np.arange(b)[:, None]
        perms = [np.stack([rng.permutation(len(f)) for _ in range(b)])
                 for f in self.families]
        src = self._shift_sources(rng.integers(0, data.height, size=b),
                                  rng.integers(0, data.width, size=b))

        word_map = np.tile(np.arange(self.vocab_size, dtype=np.int64), (b, 1))
        for base, family, perm in zip(self.bases, self.families, perms):
            word_map[:, base: base + len(family)] = base + perm

        feats = []
        for attrs in (attrs_b, attrs_a):
            shifted = np.take_along_axis(attrs, src[..., None], axis=1)
            occupied = shifted[..., 0] >= 0
            safe = np.clip(shifted, 0, None)
            f = np.zeros(shifted.shape[:2] + (spec.dim,))
            for axis, (emb, perm) in enumerate(zip(
                    (spec.shape_emb, spec.color_emb, spec.material_emb), perms)):
                f = f + emb[perm[item, safe[..., axis]]]
            f = np.where(occupied[..., None], f, 0.0)
            if cfg.sigma > 0:
                f = f + cfg.sigma * rng.standard_normal(f.shape)
            feats.append(f)
        return (feats[0], feats[1], word_map[item, inputs],
                word_map[item, targets], data.target_mask[idx])


@dataclass
class BatchLosses:
    total: Tensor
    cap: Tensor
    cv: Tensor | None
    cm: Tensor | None


def total_loss(l_cap: Tensor, l_cv: Tensor | None, l_cm: Tensor | None,
               cfg: TrainConfig) -> Tensor:
    """Weighted joint objective; inactive terms contribute exactly nothing."""
    total = l_cap
    if l_cv is not None and cfg.lambda_v != 0.0:
        total = T.add(total, T.scale(l_cv, cfg.lambda_v))
    if l_cm is not None and cfg.lambda_m != 0.0:
        total = T.add(total, T.scale(l_cm, cfg.lambda_m))
    return total


def forward_batch(params: ModelParams, cfg: TrainConfig, raw_b: np.ndarray,
                  raw_a: np.ndarray, inputs: np.ndarray, targets: np.ndarray,
                  mask: np.ndarray) -> BatchLosses:
    diff, xb, xa = encode_pair_tokens(Tensor(raw_b), Tensor(raw_a),
                                      params.encoder, cfg.encode_variant)
    logits, states = decode_states(diff, inputs, params.decoder)
    l_cap = T.cross_entropy_with_logits(logits, targets, mask)
    l_cv = None
    if cfg.uses_cross_view:
        l_cv = alignment_loss(xb, xa, cfg.alignment_config(), params.match)
    l_cm = None
    if cfg.uses_consistency:
        imagined = imagined_after_tokens(xb, states, params.consistency, state_mask=mask)
        l_cm = consistency_loss(imagined, xa, AlignmentConfig(cfg.temperature),
                                params.consistency)
    return BatchLosses(total_loss(l_cap, l_cv, l_cm, cfg), l_cap, l_cv, l_cm)


@dataclass
class TrainResult:
    config: TrainConfig
    params: ModelParams
    vocab: Vocabulary
    log_rows: list[tuple] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.log_rows[-1][1] if self.log_rows else None


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "L_total", "L_cap", "L_cv", "L_cm"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def train(pairs: list[ScenePair], cfg: TrainConfig, ckpt_path=None,
          log_path=None) -> TrainResult:
    """Run the optimization loop over pre-rendered pairs.

    Positives are the paired views of each sampled item; the other "after"
    grids in the batch act as negatives for the contrastive terms.  Aborts
    with TrainingDiverged on a non-finite loss.
    """
    cfg = cfg.resolved()
    vocab = build_vocabulary()
    spec = RenderSpec.from_seed(cfg.render_seed, cfg.d_in, cfg.sigma)
    data = prepare_arrays(pairs, vocab, cfg.max_caption_len)
    if data.size < cfg.batch_size:
        raise ValueError(f"dataset of {data.size} pairs is smaller than one batch")
    if (data.height, data.width) != (cfg.height, cfg.width):
        raise ValueError(f"dataset grid {data.height}x{data.width} does not match config")
    composer = BatchComposer(data, spec, vocab, cfg)

    params = init_params(cfg)
    named = params.as_dict()
    adam = AdamState.for_params(named, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    aug_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    rows: list[tuple] = []

    for it in range(1, cfg.iterations + 1):
        idx = rng.choice(data.size, size=cfg.batch_size, replace=False)
        raw_b, raw_a, inputs, targets, mask = composer.compose(idx, aug_rng)
        try:
            losses = forward_batch(params, cfg, raw_b, raw_a, inputs, targets, mask)
            zero_grad(named)
            T.backward(losses.total, params=named)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {exc}") from exc
        adam_step(named, adam)
        if cfg.weight_decay > 0:
            shrink = 1.0 - cfg.lr * cfg.weight_decay
            for name, p in named.items():
                if not name.endswith(("gamma", "beta")):
                    p.data = p.data * shrink
        rows.append((
            it, losses.total.item(), losses.cap.item(),
            losses.cv.item() if losses.cv is not None else 0.0,
            losses.cm.item() if losses.cm is not None else 0.0,
        ))
        if ckpt_path and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            save_checkpoint(named, ckpt_path)

    if ckpt_path:
        save_checkpoint(named, ckpt_path)
    if log_path:
        write_loss_log(rows, log_path)
    return TrainResult(cfg, params, vocab, rows)


# -- checkpoint persistence ----------------------------------------------


def save_checkpoint(params, path) -> None:
    """Binary dump: magic, then (name, rank, dims, row-major float64 LE) per
    tensor in tree order."""
    named = params.as_dict() if isinstance(params, ModelParams) else dict(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, t in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_exact(fh, count: int, context: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointError(f"truncated checkpoint while reading {context}")
    return buf


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading a record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "a parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of parameter '{name}'"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of parameter '{name}'"))
            count = int(np.prod(dims)) if rank else 1
            data = _read_exact(fh, 8 * count, f"data of parameter '{name}'")
            arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    return arrays


def load_checkpoint(path, template: ModelParams) -> ModelParams:
    """Load saved tensors into a parameter tree built from the same config;
    any name or shape mismatch is an error naming the parameter."""
    arrays = read_checkpoint_arrays(path)
    named = template.as_dict()
    for name, t in named.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'")
        arr = arrays.pop(name)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"parameter '{name}' has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr
    if arrays:
        extra = next(iter(arrays))
        raise CheckpointError(f"checkpoint carries unexpected parameter '{extra}'")
    return template
