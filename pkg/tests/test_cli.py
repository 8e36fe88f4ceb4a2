import csv
import json

import numpy as np
import pytest

from changecap.changeworld import read_dataset
from changecap.cli import main
from changecap.trainer import TrainConfig

TINY_FLAGS = [
    "--iterations", "4", "--batch-size", "4", "--seed", "0",
]

TINY_CONFIG = """\
height=2
width=2
d_in=6
d_model=8
d_embed=8
enc_heads=2
mtm_heads=2
dec_heads=2
cbr_heads=2
"""


@pytest.fixture()
def data_path(tmp_path):
    path = tmp_path / "train.jsonl"
    rc = main(["gen-data", "--out", str(path), "--pairs", "12", "--grid", "2x2",
               "--seed", "3", "--min-objects", "1", "--max-objects", "2"])
    assert rc == 0
    return path


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "desk.cfg"
    path.write_text(TINY_CONFIG)
    return path


class TestGenData:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["gen-data", "--out", str(a), "--pairs", "10", "--seed", "7"]) == 0
        assert main(["gen-data", "--out", str(b), "--pairs", "10", "--seed", "7"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_pairs_is_valid(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        assert main(["gen-data", "--out", str(path), "--pairs", "0"]) == 0
        assert read_dataset(path) == []

    def test_summary_counts_match_file(self, tmp_path, capsys):
        path = tmp_path / "d.jsonl"
        assert main(["gen-data", "--out", str(path), "--pairs", "30", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        pairs = read_dataset(path)
        for name in sorted({p.change_type for p in pairs}):
            count = sum(p.change_type == name for p in pairs)
            assert f"{name}={count}" in out

    def test_effective_config_echoed(self, tmp_path, capsys):
        path = tmp_path / "d.jsonl"
        main(["gen-data", "--out", str(path), "--pairs", "1", "--seed", "9"])
        out = capsys.readouterr().out
        assert "seed=9" in out and "pairs=1" in out


class TestTrain:
    def test_writes_checkpoint_and_log(self, data_path, config_path, tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        rc = main(["train", "--data", str(data_path), "--out", str(ckpt),
                   "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        assert rc == 0
        assert ckpt.exists()
        log = tmp_path / "model.ckpt.losses.csv"
        rows = log.read_text().strip().splitlines()
        assert len(rows) == 1 + 4

    def test_rr_gating_visible_in_effective_config(self, data_path, config_path,
                                                   tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "rr",
              "--lambda-v", "0.7", *TINY_FLAGS])
        out = capsys.readouterr().out
        assert "lambda_v=0.0" in out
        assert "variant=rr" in out

    def test_fixed_seed_reruns_identical(self, data_path, config_path, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        for out in (a, b):
            main(["train", "--data", str(data_path), "--out", str(out),
                  "--config", str(config_path), "--variant", "scorer+cbr", *TINY_FLAGS])
        assert a.read_bytes() == b.read_bytes()

    def test_effective_config_block_reproduces_run(self, data_path, config_path,
                                                   tmp_path, capsys):
        a = tmp_path / "a.ckpt"
        main(["train", "--data", str(data_path), "--out", str(a),
              "--config", str(config_path), "--variant", "scorer", *TINY_FLAGS])
        echoed = capsys.readouterr().out
        block = "\n".join(line for line in echoed.splitlines()
                          if "=" in line and not line.startswith("#"))
        replay_cfg = tmp_path / "replay.cfg"
        replay_cfg.write_text(block)
        b = tmp_path / "b.ckpt"
        main(["train", "--data", str(data_path), "--out", str(b),
              "--config", str(replay_cfg)])
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_config_key_is_error(self, data_path, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("unknown_knob=1\n")
        rc = main(["train", "--data", str(data_path), "--out", str(tmp_path / "x.ckpt"),
                   "--config", str(bad)])
        assert rc == 1


class TestEvalCommand:
    def test_eval_writes_report(self, data_path, config_path, tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        report = tmp_path / "report.csv"
        rc = main(["eval", "--data", str(data_path), "--checkpoint", str(ckpt),
                   "--config", str(config_path), "--variant", "rr", *TINY_FLAGS,
                   "--report", str(report)])
        assert rc == 0
        with open(report) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["split", "metric", "value", "count"]
        assert any(r[0] == "total" and r[1] == "exact_match" for r in rows[1:])

    def test_mismatched_checkpoint_fails_with_runtime_code(self, data_path, config_path,
                                                           tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        rc = main(["eval", "--data", str(data_path), "--checkpoint", str(ckpt),
                   *TINY_FLAGS])  # desk-size default config: shapes disagree
        assert rc == 2


class TestGradcheckCommand:
    def test_single_op(self, capsys):
        rc = main(["gradcheck", "--ops", "matmul"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "matmul" in out and "ok" in out

    def test_unknown_op_is_usage_error(self, capsys):
        assert main(["gradcheck", "--ops", "warp_drive"]) == 1


class TestInspectCommand:
    def test_writes_pgm_heatmaps(self, data_path, config_path, tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        out_dir = tmp_path / "inspect"
        rc = main(["inspect", "--checkpoint", str(ckpt), "--data", str(data_path),
                   "--pair-id", "0", "--out", str(out_dir),
                   "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        assert rc == 0
        assert (out_dir / "caption.txt").exists()
        pgms = sorted(out_dir.glob("word*.pgm"))
        assert pgms
        text = pgms[0].read_text()
        assert text.startswith("P2\n2 2\n255\n")
        levels = [int(v) for row in text.splitlines()[3:] for v in row.split()]
        assert len(levels) == 4 and all(0 <= v <= 255 for v in levels)

    def test_unknown_pair_id_fails(self, data_path, config_path, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        rc = main(["inspect", "--checkpoint", str(ckpt), "--data", str(data_path),
                   "--pair-id", "999", "--out", str(tmp_path / "x"),
                   "--config", str(config_path), "--variant", "rr", *TINY_FLAGS])
        assert rc == 2


class TestSweepCommand:
    def test_two_value_sweep_writes_csv(self, data_path, config_path, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        rc = main(["sweep", "--param", "heads", "--values", "1,2",
                   "--data", str(data_path), "--eval-data", str(data_path),
                   "--out", str(out), "--config", str(config_path),
                   "--variant", "scorer", *TINY_FLAGS])
        assert rc == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "heads"
        assert len(rows) == 3

    def test_sweep_matches_independent_train_eval(self, data_path, config_path,
                                                  tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        main(["sweep", "--param", "lambda_v", "--values", "0.2",
              "--data", str(data_path), "--eval-data", str(data_path),
              "--out", str(out), "--config", str(config_path),
              "--variant", "scorer", *TINY_FLAGS])
        with open(out) as fh:
            sweep_row = list(csv.reader(fh))[1]
        capsys.readouterr()

        ckpt = tmp_path / "repro.ckpt"
        main(["train", "--data", str(data_path), "--out", str(ckpt),
              "--config", str(config_path), "--variant", "scorer",
              "--lambda-v", "0.2", *TINY_FLAGS])
        report = tmp_path / "repro.csv"
        main(["eval", "--data", str(data_path), "--checkpoint", str(ckpt),
              "--config", str(config_path), "--variant", "scorer",
              "--lambda-v", "0.2", *TINY_FLAGS, "--report", str(report)])
        with open(report) as fh:
            rows = {(r[0], r[1]): r[2] for r in list(csv.reader(fh))[1:]}
        assert float(sweep_row[1]) == float(rows[("total", "exact_match")])
        assert float(sweep_row[2]) == float(rows[("total", "bleu4")])

    def test_unknown_param_is_usage_error(self, data_path):
        assert main(["sweep", "--param", "depth", "--values", "1",
                     "--data", str(data_path), "--eval-data", str(data_path),
                     "--out", "/tmp/x.csv"]) == 1


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self):
        assert main(["gen-data", "--pairs", "3"]) == 1

    def test_missing_data_file_is_runtime_error(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "x.ckpt"), *TINY_FLAGS])
        assert rc == 2
