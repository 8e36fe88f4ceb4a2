"""Evaluation: exact match, corpus BLEU-4, attention-based change
localization, and the pair-alignment margin, with per-change-type and
semantic/distractor breakdowns."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .changeworld import (COLORS, DISTRACTOR, MATERIALS, SHAPES, RenderSpec,
                          ScenePair, build_vocabulary, render_pair)
from .decoder import BOS, EOS, PAD, CaptionSeq, greedy_decode
from .encoder import encode_pair_tokens
from .similarity import batch_similarity
from .tensor import Tensor
from .trainer import ModelParams, TrainConfig

ATTRIBUTE_WORDS = frozenset(COLORS + SHAPES + MATERIALS)


def _clean_ids(seq) -> list[int]:
    """Token ids between BOS and the first EOS, PAD stripped."""
    ids = list(seq.ids) if isinstance(seq, CaptionSeq) else list(seq)
    if ids and ids[0] == BOS:
        ids = ids[1:]
    if EOS in ids:
        ids = ids[: ids.index(EOS)]
    return [i for i in ids if i != PAD]


def exact_match(pred, ref) -> int:
    """1 iff the payload tokens agree; PAD tails and EOS framing ignored."""
    return int(_clean_ids(pred) == _clean_ids(ref))


def _ngrams(words, n: int) -> Counter:
    return Counter(tuple(words[i: i + n]) for i in range(len(words) - n + 1))


def bleu4(preds: list[list[str]], refs: list[list[str]]) -> float:
    """Corpus BLEU with n in 1..4, add-one smoothing for n >= 2, and the
    standard brevity penalty."""
    if not preds or len(preds) != len(refs):
        raise ValueError("corpus must be non-empty and aligned")
    pred_len = sum(len(p) for p in preds)
    ref_len = sum(len(r) for r in refs)
    if pred_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        match = 0
        total = 0
        for p, r in zip(preds, refs):
            pc = _ngrams(p, n)
            rc = _ngrams(r, n)
            match += sum(min(c, rc[g]) for g, c in pc.items())
            total += max(len(p) - n + 1, 0)
        if n >= 2:
            match += 1
            total += 1
        if match == 0:
            return 0.0
        log_sum += 0.25 * np.log(match / total)
    bp = 1.0 if pred_len > ref_len else float(np.exp(1.0 - ref_len / pred_len))
    return bp * float(np.exp(log_sum))


def accepted_cells(pair: ScenePair) -> list[int]:
    """Grid cells that count as a localization hit: the changed cell in the
    before frame and the shift-corrected changed cell of the after view."""
    cells = []
    if pair.changed_before is not None:
        cells.append(pair.changed_before)
    back = pair.unshifted_after_index()
    if back is not None and back not in cells:
        cells.append(back)
    return cells


def localization_score(attn_maps, words: list[str], pair: ScenePair) -> int | None:
    """Hit test for one decoded pair.

    ``attn_maps`` holds one (heads, N) cross-attention map per generated
    word.  Maps at attribute words (colors, shapes, materials) average over
    heads and steps; the argmax cell must be one of the accepted cells.
    Distractor pairs are skipped (None).
    """
    if pair.change_type == DISTRACTOR:
        return None
    targets = accepted_cells(pair)
    if not targets or not attn_maps:
        return None
    picked = [m for m, w in zip(attn_maps, words) if w in ATTRIBUTE_WORDS]
    if not picked:
        picked = list(attn_maps)
    mean_map = np.mean([m.mean(axis=0) for m in picked], axis=0)
    return int(int(np.argmax(mean_map)) in targets)


@dataclass
class SplitStats:
    count: int = 0
    exact: int = 0
    preds: list = field(default_factory=list)
    refs: list = field(default_factory=list)

    def rate(self) -> float:
        return self.exact / self.count if self.count else 0.0

    def bleu(self) -> float:
        return bleu4(self.preds, self.refs) if self.count else 0.0


@dataclass
class EvalReport:
    total_count: int
    exact_match: float
    bleu4: float
    semantic_count: int
    semantic_exact: float
    semantic_bleu: float
    distractor_count: int
    distractor_exact: float
    distractor_bleu: float
    per_type: dict[str, tuple[float, int]]
    localization_rate: float
    localization_count: int
    localization_chance: float
    margin_positive: float
    margin_negative: float

    @property
    def margin(self) -> float:
        return self.margin_positive - self.margin_negative

    def rows(self) -> list[tuple[str, str, float, int]]:
        out = [
            ("total", "exact_match", self.exact_match, self.total_count),
            ("total", "bleu4", self.bleu4, self.total_count),
            ("semantic", "exact_match", self.semantic_exact, self.semantic_count),
            ("semantic", "bleu4", self.semantic_bleu, self.semantic_count),
            ("distractor", "exact_match", self.distractor_exact, self.distractor_count),
            ("distractor", "bleu4", self.distractor_bleu, self.distractor_count),
            ("total", "localization", self.localization_rate, self.localization_count),
            ("total", "localization_chance", self.localization_chance, self.localization_count),
            ("total", "margin_positive", self.margin_positive, self.total_count),
            ("total", "margin_negative", self.margin_negative, self.total_count),
            ("total", "margin", self.margin, self.total_count),
        ]
        for name in sorted(self.per_type):
            rate, count = self.per_type[name]
            out.append((f"type:{name}", "exact_match", rate, count))
        return out

    def text(self) -> str:
        lines = [
            f"pairs evaluated     {self.total_count}",
            f"exact match         {self.exact_match:.4f}",
            f"BLEU-4              {self.bleu4:.4f}",
            f"semantic EM         {self.semantic_exact:.4f} over {self.semantic_count}",
            f"distractor EM       {self.distractor_exact:.4f} over {self.distractor_count}",
            f"localization        {self.localization_rate:.4f} over {self.localization_count}"
            f" (chance {self.localization_chance:.4f})",
            f"alignment margin    {self.margin:.4f}"
            f" (pos {self.margin_positive:.4f}, neg {self.margin_negative:.4f})",
        ]
        for name in sorted(self.per_type):
            rate, count = self.per_type[name]
            lines.append(f"  {name:<11} EM {rate:.4f} over {count}")
        return "\n".join(lines)


def alignment_margin(params: ModelParams, cfg: TrainConfig, before: np.ndarray,
                     after: np.ndarray) -> tuple[float, float]:
    """Mean positive-pair score and mean in-batch negative score of the
    projected views under the trained matching heads."""
    pos_sum, pos_n, neg_sum, neg_n = 0.0, 0, 0.0, 0
    b = cfg.batch_size
    with T.no_grad():
        for start in range(0, before.shape[0] - 1, b):
            rb = before[start: start + b]
            ra = after[start: start + b]
            if rb.shape[0] < 2:
                continue
            _, xb, xa = encode_pair_tokens(Tensor(rb), Tensor(ra),
                                           params.encoder, cfg.encode_variant)
            s = batch_similarity(xb, xa, cfg.alignment_config(), params.match).values.data
            k = s.shape[0]
            pos_sum += np.trace(s)
            pos_n += k
            neg_sum += s.sum() - np.trace(s)
            neg_n += k * k - k
    if pos_n == 0:
        return 0.0, 0.0
    return pos_sum / pos_n, (neg_sum / neg_n if neg_n else 0.0)


def evaluate(params: ModelParams, pairs: list[ScenePair], cfg: TrainConfig) -> EvalReport:
    """Greedy-decode every pair and aggregate all metrics."""
    if not pairs:
        raise ValueError("evaluation dataset is empty")
    cfg = cfg.resolved()
    vocab = build_vocabulary()
    spec = RenderSpec.from_seed(cfg.render_seed, cfg.d_in, cfg.sigma)

    total = SplitStats()
    semantic = SplitStats()
    distractor = SplitStats()
    by_type: dict[str, SplitStats] = {}
    loc_hits, loc_count, chance_sum = 0, 0, 0.0
    befores, afters = [], []

    for pair in pairs:
        raw_b, raw_a = render_pair(pair, spec)
        befores.append(raw_b)
        afters.append(raw_a)
        with T.no_grad():
            diff, _, _ = encode_pair_tokens(Tensor(raw_b), Tensor(raw_a),
                                            params.encoder, cfg.encode_variant)
        seq, maps = greedy_decode(diff, params.decoder, cfg.max_caption_len,
                                  record_attention=True)
        ref = CaptionSeq.from_words(vocab, pair.caption)
        em = exact_match(seq, ref)
        pred_words = vocab.decode_ids(_clean_ids(seq))
        for stats in (total,
                      distractor if pair.change_type == DISTRACTOR else semantic,
                      by_type.setdefault(pair.change_type, SplitStats())):
            stats.count += 1
            stats.exact += em
            stats.preds.append(pred_words)
            stats.refs.append(list(pair.caption))
        hit = localization_score(maps, pred_words, pair)
        if hit is not None:
            loc_hits += hit
            loc_count += 1
            chance_sum += len(accepted_cells(pair)) / pair.num_cells

    pos, neg = alignment_margin(params, cfg, np.stack(befores), np.stack(afters))
    return EvalReport(
        total_count=total.count, exact_match=total.rate(), bleu4=total.bleu(),
        semantic_count=semantic.count, semantic_exact=semantic.rate(),
        semantic_bleu=semantic.bleu(),
        distractor_count=distractor.count, distractor_exact=distractor.rate(),
        distractor_bleu=distractor.bleu(),
        per_type={name: (s.rate(), s.count) for name, s in by_type.items()},
        localization_rate=loc_hits / loc_count if loc_count else 0.0,
        localization_count=loc_count,
        localization_chance=chance_sum / loc_count if loc_count else 0.0,
        margin_positive=pos, margin_negative=neg,
    )


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "metric", "value", "count"])
        for split, metric, value, count in report.rows():
            writer.writerow([split, metric, f"{value:.10g}", count])
