"""Command-line entry points: gen-data, train, eval, gradcheck, inspect, sweep.

Every command prints an effective-config block of key=value lines; feeding
that block back as a config file reproduces the run bit-exactly.  Exit
codes: 0 success, 1 usage error, 2 runtime or validation failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .changeworld import (DatasetError, GenerationError, RenderSpec, build_vocabulary,
                          generate_dataset, read_dataset, render_pair, write_dataset)
from .decoder import greedy_decode
from .encoder import encode_pair_tokens
from .metrics import evaluate, write_report_csv
from .tensor import GradientError, NonFiniteError, Tensor, no_grad
from .trainer import (PRESETS, CheckpointError, TrainConfig, TrainingDiverged,
                      init_params, load_checkpoint, train)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str, base: TrainConfig) -> TrainConfig:
    """Apply key=value lines to a config; unknown keys are errors."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        current = getattr(base, key)
        if isinstance(current, bool):
            updates[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            updates[key] = int(value)
        elif isinstance(current, float):
            updates[key] = float(value)
        else:
            updates[key] = value
    return replace(base, **updates)


def config_block(cfg: TrainConfig) -> str:
    lines = ["# effective config"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines)


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}")
        cfg = replace(cfg, **PRESETS[args.preset])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = parse_config_text(path.read_text(encoding="utf-8"), cfg)
    overrides = {}
    for name in _CONFIG_FIELDS:
        flag = name.replace("_", "-")
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.resolved()


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--preset", help="named preset: " + ", ".join(sorted(PRESETS)))
    parser.add_argument("--variant", choices=("subtraction", "rr", "scorer",
                                              "rr+cbr", "scorer+cbr"))
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--lambda-v", dest="lambda_v", type=float)
    parser.add_argument("--lambda-m", dest="lambda_m", type=float)
    parser.add_argument("--tau", dest="temperature", type=float)
    parser.add_argument("--sim-mode", dest="sim_mode",
                        choices=("mtm", "tm", "mean-pool", "max-pool"))
    parser.add_argument("--loss-mode", dest="loss_mode", choices=("infonce", "l2"))
    parser.add_argument("--enc-layers", dest="enc_layers", type=int)
    parser.add_argument("--enc-heads", dest="enc_heads", type=int)
    parser.add_argument("--mtm-heads", dest="mtm_heads", type=int)
    parser.add_argument("--dec-layers", dest="dec_layers", type=int)
    parser.add_argument("--dec-heads", dest="dec_heads", type=int)
    parser.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"--grid expects HxW, got {text!r}") from exc


def cmd_gen_data(args) -> int:
    height, width = _parse_grid(args.grid)
    print("# effective config")
    for key in ("out", "pairs", "grid", "seed", "distractor_rate",
                "min_objects", "max_objects", "max_shift"):
        print(f"{key}={getattr(args, key)}")
    pairs = generate_dataset(args.pairs, args.seed, height, width,
                             args.distractor_rate, None,
                             args.min_objects, args.max_objects,
                             max_shift=args.max_shift)
    write_dataset(pairs, args.out)
    counts = Counter(p.change_type for p in pairs)
    summary = " ".join(f"{name}={counts[name]}" for name in sorted(counts))
    print(f"wrote {len(pairs)} pairs to {args.out} ({summary or 'empty'})")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    print(config_block(cfg))
    pairs = read_dataset(args.data)
    log_path = args.log or str(args.out) + ".losses.csv"
    result = train(pairs, cfg, ckpt_path=args.out, log_path=log_path)
    print(f"wrote checkpoint to {args.out} and losses to {log_path}")
    final = "n/a" if result.final_loss is None else f"{result.final_loss:.6f}"
    print(f"final loss {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    print(config_block(cfg))
    pairs = read_dataset(args.data)
    params = load_checkpoint(args.checkpoint, init_params(cfg))
    report = evaluate(params, pairs, cfg)
    report_path = args.report or str(args.checkpoint) + ".report.csv"
    write_report_csv(report, report_path)
    print(report.text())
    print(f"wrote report to {report_path}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.ops == "all":
        names = list(gc.CHECKS)
    else:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in gc.CHECKS]
        if unknown:
            raise UsageError(f"unknown ops: {', '.join(unknown)}; "
                             f"choose from {', '.join(gc.CHECKS)}")
    print("# effective config")
    print(f"ops={','.join(names)}")
    print(f"step={args.step}")
    worst = 0.0
    failed = []
    for name in names:
        err = gc.run_check(name, seed=args.seed or 0, step=args.step)
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:<32} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
        if err >= 1e-4:
            failed.append(name)
    print(f"worst {worst:.3e}")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def _pgm_text(values: np.ndarray, height: int, width: int) -> str:
    grid = values.reshape(height, width)
    peak = grid.max()
    levels = np.zeros((height, width), dtype=int) if peak <= 0 else \
        np.rint(grid / peak * 255).astype(int)
    lines = [f"P2", f"{width} {height}", "255"]
    for row in levels:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    cfg = _build_config(args)
    print(config_block(cfg))
    pairs = read_dataset(args.data)
    matches = [p for p in pairs if p.pair_id == args.pair_id]
    if not matches:
        raise DatasetError(f"pair id {args.pair_id} not found in {args.data}")
    pair = matches[0]
    params = load_checkpoint(args.checkpoint, init_params(cfg))
    spec = RenderSpec.from_seed(cfg.render_seed, cfg.d_in, cfg.sigma)
    raw_b, raw_a = render_pair(pair, spec)
    with no_grad():
        diff, _, _ = encode_pair_tokens(Tensor(raw_b), Tensor(raw_a),
                                        params.encoder, cfg.encode_variant)
    seq, maps = greedy_decode(diff, params.decoder, cfg.max_caption_len,
                              record_attention=True)
    vocab = build_vocabulary()
    words = vocab.decode_ids(seq.ids[1:])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    caption_text = " ".join(w for w in words if w not in ("<eos>", "<pad>"))
    (out_dir / "caption.txt").write_text(caption_text + "\n", encoding="utf-8")
    for i, attn in enumerate(maps):
        word = words[i] if i < len(words) else "<eos>"
        safe = "".join(ch if ch.isalnum() else "_" for ch in word)
        path = out_dir / f"word{i:02d}_{safe}.pgm"
        path.write_text(_pgm_text(attn.mean(axis=0), pair.height, pair.width),
                        encoding="utf-8")
    print(f"decoded: {caption_text}")
    print(f"wrote {len(maps)} heatmaps to {out_dir}")
    return 0


SWEEP_PARAMS = {
    "heads": ("mtm_heads", "enc_heads"),
    "layers": ("enc_layers",),
    "lambda_v": ("lambda_v",),
    "lambda_m": ("lambda_m",),
}


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep param {args.param!r}; "
                         f"choose from {', '.join(SWEEP_PARAMS)}")
    base = _build_config(args)
    print(config_block(base))
    is_int = args.param in ("heads", "layers")
    try:
        values = [int(v) if is_int else float(v) for v in args.values.split(",") if v]
    except ValueError as exc:
        raise UsageError(f"bad sweep values {args.values!r}") from exc
    if not values:
        raise UsageError("no sweep values given")
    train_pairs = read_dataset(args.data)
    eval_pairs = read_dataset(args.eval_data)
    rows = []
    for value in values:
        cfg = replace(base, **{name: value for name in SWEEP_PARAMS[args.param]}).resolved()
        result = train(train_pairs, cfg)
        report = evaluate(result.params, eval_pairs, cfg)
        rows.append((value, report.exact_match, report.bleu4,
                     report.localization_rate, report.margin))
        print(f"{args.param}={value}: EM {report.exact_match:.4f} "
              f"BLEU {report.bleu4:.4f} loc {report.localization_rate:.4f} "
              f"margin {report.margin:.4f}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.param, "exact_match", "bleu4", "localization", "margin"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
    print(f"wrote sweep results to {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="changecap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene-pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--grid", default="4x4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractor-rate", dest="distractor_rate", type=float, default=0.2)
    p.add_argument("--min-objects", dest="min_objects", type=int, default=2)
    p.add_argument("--max-objects", dest="max_objects", type=int, default=5)
    p.add_argument("--max-shift", dest="max_shift", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks per op")
    p.add_argument("--ops", default="all")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump per-word attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair-id", dest="pair_id", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="train and evaluate across one knob")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetError, GenerationError, CheckpointError, TrainingDiverged,
            NonFiniteError, GradientError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
