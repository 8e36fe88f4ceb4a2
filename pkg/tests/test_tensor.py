import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from changecap import tensor as T
from changecap.gradcheck import CHECKS, run_check
from changecap.tensor import (GradientError, MhaParams, NonFiniteError, Tensor, backward,
                              causal_mask, multi_head_attention, no_grad)


def rand(rng, *shape, grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_orthogonal_pick(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
        assert np.array_equal(out.data, [[0.0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - want).max() < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([0.0, math.log(3.0)]))
        assert np.abs(out.data - [0.25, 0.75]).max() < 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 6))
        a = T.softmax_rows(Tensor(x)).data
        b = T.softmax_rows(Tensor(x + 7.25)).data
        assert np.abs(a - b).max() < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, row):
        out = T.softmax_rows(Tensor([row]))
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert (out.data >= 0).all()

    def test_mask_exact_zero(self):
        x = Tensor(np.zeros((3, 3)))
        out = T.softmax_rows(x, causal_mask(3))
        assert out.data[0, 1] == 0.0 and out.data[0, 2] == 0.0 and out.data[1, 2] == 0.0


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor([2.0, 2.0, 2.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(out.data).max() < 1e-12

    def test_closed_form(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           eps=1e-5)
        want = 1.0 / math.sqrt(1.0 + 1e-5)
        assert np.abs(out.data - [-want, want]).max() < 1e-12
        assert np.abs(out.data - [-0.999995, 0.999995]).max() < 1e-6

    def test_zero_gain_collapses_to_shift(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 5))
        beta = rng.standard_normal(5)
        out = T.layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(beta))
        assert np.array_equal(out.data, np.broadcast_to(beta, (4, 5)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
    def test_standardized_stats(self, d, seed):
        x = np.random.default_rng(seed).standard_normal((3, d)) * 5.0
        assume(x.var(axis=-1).min() > 0.5)  # stats claim needs variance >> eps
        out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-9
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def identity_mha(d, heads=1):
    eye = lambda: Tensor(np.eye(d))
    return MhaParams(heads, eye(), eye(), eye(), eye())


class TestMultiHeadAttention:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(2)
        q = rand(rng, 3, 4)
        k = rand(rng, 1, 4)
        v = rand(rng, 1, 4)
        out = multi_head_attention(q, k, v, identity_mha(4, heads=2))
        assert np.abs(out.data - np.broadcast_to(v.data, (3, 4))).max() < 1e-12

    def test_causal_mask_zeroes_future(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 5, 4)
        _, w = multi_head_attention(x, x, x, identity_mha(4, 2), causal=True,
                                    return_weights=True)
        for t in range(5):
            assert (w[:, t, t + 1:] == 0.0).all()

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(4)
        d, h, nq, nk = 6, 3, 4, 5
        p = MhaParams(h, rand(rng, d, d), rand(rng, d, d), rand(rng, d, d), rand(rng, d, d))
        q, k, v = rand(rng, nq, d), rand(rng, nk, d), rand(rng, nk, d)
        got = multi_head_attention(q, k, v, p).data

        hd = d // h
        qp, kp, vp = q.data @ p.wq.data, k.data @ p.wk.data, v.data @ p.wv.data
        heads = []
        for i in range(h):
            qi = qp[:, i * hd:(i + 1) * hd]
            ki = kp[:, i * hd:(i + 1) * hd]
            vi = vp[:, i * hd:(i + 1) * hd]
            s = qi @ ki.T / math.sqrt(hd)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            heads.append(a @ vi)
        want = np.concatenate(heads, axis=-1) @ p.wo.data
        assert np.abs(got - want).max() < 1e-12

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        q, k, v = rand(rng, 4, 6), rand(rng, 7, 6), rand(rng, 7, 6)
        p = MhaParams(2, rand(rng, 6, 6), rand(rng, 6, 6), rand(rng, 6, 6), rand(rng, 6, 6))
        _, w = multi_head_attention(q, k, v, p, return_weights=True)
        assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-12

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            multi_head_attention(rand(rng, 2, 5), rand(rng, 2, 5), rand(rng, 2, 5),
                                 identity_mha(5, heads=2))


class TestPrimitives:
    def test_relu(self):
        assert np.array_equal(T.relu(Tensor([4.0, -1.0])).data, [4.0, 0.0])

    def test_mean_pool_rows(self):
        assert np.array_equal(T.mean_pool_rows(Tensor([[1.0, 3.0], [3.0, 5.0]])).data,
                              [2.0, 4.0])

    def test_concat_last(self):
        out = T.concat_last(Tensor([[1.0]]), Tensor([[2.0]]))
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_embedding_gather(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = T.embedding_gather(table, np.array([2, 0]))
        assert np.array_equal(out.data, [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]])

    def test_embedding_index_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_gather(Tensor(np.ones((4, 3))), np.array([4]))

    def test_broadcast_vector_to_grid(self):
        out = T.broadcast_vector_to_grid(Tensor([1.0, 2.0]), 3)
        assert np.array_equal(out.data, [[1.0, 2.0]] * 3)

    def test_max_pool_rows(self):
        out = T.max_pool_rows(Tensor([[1.0, 5.0], [3.0, 2.0]]))
        assert np.array_equal(out.data, [3.0, 5.0])

    def test_l2_normalize_zero_row_stays_zero(self):
        out = T.l2_normalize_rows(Tensor([[0.0, 0.0], [3.0, 4.0]]))
        assert np.array_equal(out.data[0], [0.0, 0.0])
        assert np.abs(out.data[1] - [0.6, 0.8]).max() < 1e-15


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy_with_logits(Tensor(np.zeros((1, 4))), np.array([2]))
        assert abs(loss.item() - math.log(4.0)) < 1e-12

    def test_one_hot_confident(self):
        logits = np.zeros((1, 5))
        logits[0, 3] = 20.0
        loss = T.cross_entropy_with_logits(Tensor(logits), np.array([3]))
        assert loss.item() < 1e-8

    def test_mean_over_identical_rows(self):
        rng = np.random.default_rng(7)
        row = rng.standard_normal(6)
        single = T.cross_entropy_with_logits(Tensor(row[None]), np.array([4])).item()
        double = T.cross_entropy_with_logits(Tensor(np.stack([row, row])),
                                             np.array([4, 4])).item()
        assert double == single

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy_with_logits(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_mask_excludes_rows(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((3, 4))
        targets = np.array([0, 1, 2])
        masked = T.cross_entropy_with_logits(Tensor(logits), targets,
                                             np.array([True, False, True])).item()
        direct = T.cross_entropy_with_logits(Tensor(logits[[0, 2]]),
                                             targets[[0, 2]]).item()
        assert abs(masked - direct) < 1e-15


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.reduce_sum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_product_gradient(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        backward(T.mul(x, y))
        assert x.grad == 3.0 and y.grad == 2.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(T.relu(x))

    def test_double_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(x)
        backward(loss)
        with pytest.raises(GradientError):
            backward(loss)

    def test_unreachable_params_get_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        backward(T.reduce_sum(x), params={"x": x, "unused": unused})
        assert np.array_equal(unused.grad, np.zeros((2, 2)))

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = T.reduce_sum(x)
        assert not out.requires_grad

    def test_non_finite_forward_raises(self):
        big = Tensor([1e308])
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            T.scale(big, 1e10)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(3.0, requires_grad=True)
        backward(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        assert abs(x.grad - 7.0) < 1e-12


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_finite_difference_suite(name):
    assert run_check(name, seed=11) < 1e-4
