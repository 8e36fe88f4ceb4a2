import numpy as np
import pytest

from changecap import similarity as S
from changecap import tensor as T
from changecap.changeworld import RenderSpec, build_vocabulary, generate_dataset
from changecap.optim import zero_grad
from changecap.tensor import Tensor
from changecap.trainer import (CHECKPOINT_MAGIC, CheckpointError, TrainConfig,
                               forward_batch, init_params, load_checkpoint, prepare_arrays,
                               save_checkpoint, total_loss, train, write_loss_log)

TINY = dict(iterations=5, batch_size=4, height=2, width=2, d_in=6, d_model=8,
            d_embed=8, enc_heads=2, mtm_heads=2, dec_heads=2, cbr_heads=2)


def tiny_config(**kw):
    merged = {**TINY, **kw}
    return TrainConfig(**merged)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(12, seed=3, height=2, width=2, min_objects=1, max_objects=2)


class TestConfig:
    def test_variant_gating_forces_lambdas(self):
        cfg = TrainConfig(variant="rr", lambda_v=0.5, lambda_m=0.5).resolved()
        assert cfg.lambda_v == 0.0 and cfg.lambda_m == 0.0
        cfg = TrainConfig(variant="scorer", lambda_v=0.5, lambda_m=0.5).resolved()
        assert cfg.lambda_v == 0.5 and cfg.lambda_m == 0.0
        cfg = TrainConfig(variant="scorer+cbr", lambda_v=0.5, lambda_m=0.5).resolved()
        assert cfg.lambda_v == 0.5 and cfg.lambda_m == 0.5
        cfg = TrainConfig(variant="rr+cbr", lambda_v=0.5, lambda_m=0.5).resolved()
        assert cfg.lambda_v == 0.0 and cfg.lambda_m == 0.5

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(variant="bigger").resolved()

    def test_contrastive_needs_batch_of_two(self):
        with pytest.raises(ValueError):
            TrainConfig(variant="scorer", batch_size=1).resolved()
        TrainConfig(variant="rr", batch_size=1).resolved()  # fine without contrast

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            TrainConfig(d_model=10, mtm_heads=4).resolved()


class TestTotalLoss:
    def test_inactive_terms_return_caption_loss_object(self):
        cap = Tensor(1.25)
        cfg = tiny_config(variant="rr").resolved()
        assert total_loss(cap, None, None, cfg) is cap

    def test_paper_default_weighting(self):
        cfg = tiny_config(variant="scorer+cbr", lambda_v=0.1, lambda_m=0.001).resolved()
        got = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg).item()
        assert abs(got - (1.0 + 0.1 * 2.0 + 0.001 * 3.0)) < 1e-15

    def test_arithmetic_example(self):
        cfg = tiny_config(variant="scorer+cbr", lambda_v=0.5, lambda_m=0.25).resolved()
        got = total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg).item()
        assert got == 2.75


class TestInitParams:
    def test_same_seed_identical(self):
        cfg = tiny_config()
        a = dict(init_params(cfg, seed=5).named())
        b = dict(init_params(cfg, seed=5).named())
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name

    def test_layer_norm_gains_are_one(self):
        params = init_params(tiny_config(), seed=0)
        for name, t in params.named():
            if name.endswith("gamma"):
                assert np.array_equal(t.data, np.ones_like(t.data)), name
            if name.endswith(("beta", ".diff_b", ".out_b", "ffn_b1", "ffn_b2")):
                assert np.array_equal(t.data, np.zeros_like(t.data)), name

    def test_fan_in_bound_holds(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=1)
        tables = {"encoder.pos", "decoder.embed"}
        for name, t in params.named():
            if t.data.ndim < 2 or name in tables:
                continue
            fan_in = t.data.shape[-2] if t.data.ndim == 2 else t.data.shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            assert np.abs(t.data).max() <= bound, name

    def test_all_params_require_grad(self):
        for name, t in init_params(tiny_config(), seed=2).named():
            assert t.requires_grad, name


def batch_slices(data, idx, spec):
    from changecap.changeworld import attrs_to_features

    return (attrs_to_features(data.before_attrs[idx], spec),
            attrs_to_features(data.after_attrs[idx], spec),
            data.inputs[idx], data.targets[idx], data.target_mask[idx])


class TestForwardBatch:
    def make_inputs(self, tiny_dataset, cfg):
        spec = RenderSpec.from_seed(cfg.render_seed, cfg.d_in, cfg.sigma)
        return prepare_arrays(tiny_dataset, build_vocabulary(), cfg.max_caption_len), spec

    def test_rr_never_touches_matching_kernel(self, tiny_dataset):
        cfg = tiny_config(variant="rr").resolved()
        data, spec = self.make_inputs(tiny_dataset, cfg)
        params = init_params(cfg)
        S.reset_instrumentation()
        idx = np.arange(cfg.batch_size)
        losses = forward_batch(params, cfg, *batch_slices(data, idx, spec))
        T.backward(losses.total, params=params.as_dict())
        assert S.KERNEL_CALLS == 0 and S.INFO_NCE_CALLS == 0
        assert losses.cv is None and losses.cm is None

    def test_full_variant_uses_kernel_twice(self, tiny_dataset):
        cfg = tiny_config(variant="scorer+cbr").resolved()
        data, spec = self.make_inputs(tiny_dataset, cfg)
        params = init_params(cfg)
        S.reset_instrumentation()
        idx = np.arange(cfg.batch_size)
        forward_batch(params, cfg, *batch_slices(data, idx, spec))
        assert S.KERNEL_CALLS == 2 and S.INFO_NCE_CALLS == 2

    def test_gradient_reaches_every_group(self, tiny_dataset):
        cfg = tiny_config(variant="scorer+cbr").resolved()
        data, spec = self.make_inputs(tiny_dataset, cfg)
        params = init_params(cfg)
        named = params.as_dict()
        idx = np.arange(cfg.batch_size)
        losses = forward_batch(params, cfg, *batch_slices(data, idx, spec))
        zero_grad(named)
        T.backward(losses.total, params=named)
        for group in ("encoder.", "match.", "decoder.", "consistency."):
            total = sum(np.abs(t.grad).sum() for name, t in named.items()
                        if name.startswith(group))
            assert total > 0, group


class TestTrainLoop:
    def test_zero_iterations_returns_initialization(self, tiny_dataset):
        cfg = tiny_config(iterations=0)
        result = train(tiny_dataset, cfg)
        want = init_params(cfg.resolved())
        for (name, got), (_, init) in zip(result.params.named(), want.named()):
            assert np.array_equal(got.data, init.data), name

    def test_fixed_seed_runs_bit_identical(self, tiny_dataset, tmp_path):
        cfg = tiny_config(iterations=6, seed=11)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        train(tiny_dataset, cfg, ckpt_path=p1)
        train(tiny_dataset, cfg, ckpt_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loss_log_has_one_row_per_iteration(self, tiny_dataset, tmp_path):
        cfg = tiny_config(iterations=7)
        log = tmp_path / "losses.csv"
        result = train(tiny_dataset, cfg, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "iter,L_total,L_cap,L_cv,L_cm"
        assert len(lines) == 1 + 7
        assert len(result.log_rows) == 7

    def test_inactive_components_logged_as_zero(self, tiny_dataset):
        result = train(tiny_dataset, tiny_config(variant="rr", iterations=2))
        for row in result.log_rows:
            assert row[3] == 0.0 and row[4] == 0.0

    def test_loss_decreases_on_tiny_overfit(self, tiny_dataset):
        cfg = tiny_config(variant="scorer+cbr", iterations=60, batch_size=4, lr=3e-3)
        result = train(tiny_dataset[:4], cfg)
        first = np.mean([r[1] for r in result.log_rows[:5]])
        last = np.mean([r[1] for r in result.log_rows[-5:]])
        assert last < first

    def test_dataset_smaller_than_batch_rejected(self, tiny_dataset):
        with pytest.raises(ValueError):
            train(tiny_dataset[:2], tiny_config(batch_size=4))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, seed=4)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path, init_params(cfg, seed=99))
        for (name, a), (_, b) in zip(params.named(), loaded.named()):
            assert np.array_equal(a.data, b.data), name

    def test_magic_prefix_written(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(init_params(tiny_config()), path)
        assert path.read_bytes()[: len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC

    def test_corrupted_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(init_params(tiny_config()), path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path, init_params(tiny_config()))

    def test_truncated_file_names_parameter(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(init_params(tiny_config()), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path, init_params(tiny_config()))

    def test_mismatched_config_names_first_offender(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(init_params(tiny_config()), path)
        bigger = tiny_config(d_model=16)
        with pytest.raises(CheckpointError, match="encoder.proj"):
            load_checkpoint(path, init_params(bigger))

    def test_missing_parameter_named(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg)
        named = dict(params.named())
        named.pop("decoder.out_b")
        path = tmp_path / "model.ckpt"
        save_checkpoint(named, path)
        with pytest.raises(CheckpointError, match="decoder.out_b"):
            load_checkpoint(path, init_params(cfg))
