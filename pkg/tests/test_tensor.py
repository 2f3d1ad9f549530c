"""Tensor engine: forward values, gradient correctness, masking semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finegrain import ops, tensor
from finegrain.errors import DegenerateMaskError, ShapeError
from finegrain.gradcheck import check_gradients
from finegrain.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


class TestTensorBasics:
    def test_flat_storage_matches_shape(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert math.prod(t.shape) == t.data.size

    def test_grad_absent_before_backward(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        assert t.grad is None

    def test_grad_same_length_as_data(self):
        t = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        tensor.tsum(tensor.mul(t, t)).backward()
        assert t.grad.size == t.data.size

    def test_leaf_accumulates_from_all_consumers(self):
        x = Tensor([2.0], requires_grad=True)
        y = tensor.add(tensor.mul(x, x), tensor.scale(x, 3.0))  # x^2 + 3x
        tensor.tsum(y).backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_backward_requires_scalar(self):
        t = Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ShapeError):
            tensor.mul(t, t).backward()

    def test_shared_subexpression_visited_once(self):
        x = Tensor([1.5], requires_grad=True)
        shared = tensor.mul(x, x)
        out = tensor.tsum(tensor.add(shared, shared))  # 2x^2
        out.backward()
        assert x.grad[0] == pytest.approx(4 * 1.5)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(tensor.matmul(eye, a).array, a.array)

    def test_selector_row(self):
        sel = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert tensor.matmul(sel, b).array.tolist() == [[5.0, 6.0], [0.0, 0.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            tensor.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_vs_finite_differences(self):
        r = rng(7)
        a = Tensor(r.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(r.normal(size=(4, 2)), requires_grad=True)
        err = check_gradients(lambda: tensor.tsum(tensor.mul(m := tensor.matmul(a, b), m)), [a, b])
        assert err < 1e-3


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((3, 8)))
        loss = ops.softmax_cross_entropy(logits, [0, 3, 7])
        assert loss.item() == pytest.approx(math.log(8), abs=1e-12)

    def test_saturation_with_margin(self):
        logits = Tensor([[20.0, 0.0]])
        assert ops.softmax_cross_entropy(logits, [0]).item() < 1e-8

    def test_matches_hand_formula(self):
        row = np.array([1.0, 2.0, 0.5])
        expected = -(row[1] - np.log(np.exp(row).sum()))
        loss = ops.softmax_cross_entropy(Tensor(row[None, :]), [1])
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ops.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [4])

    def test_gradient(self):
        logits = Tensor(rng(3).normal(size=(4, 6)), requires_grad=True)
        err = check_gradients(lambda: ops.softmax_cross_entropy(logits, [1, 0, 5, 2]), [logits])
        assert err < 1e-3


class TestMaskedAttention:
    def test_single_visible_key_forces_output(self):
        r = rng(11)
        q = Tensor(r.normal(size=(3, 4)))
        k = Tensor(r.normal(size=(5, 4)))
        v = Tensor(r.normal(size=(5, 4)))
        mask = np.zeros(5, dtype=bool)
        mask[2] = True
        out = ops.masked_attention(q, k, v, mask)
        assert np.array_equal(out.array, np.tile(v.array[2], (3, 1)))

    def test_identical_keys_give_uniform_weights(self):
        q = Tensor(rng(1).normal(size=(2, 4)))
        k = Tensor(np.tile(rng(2).normal(size=(1, 4)), (6, 1)))
        logits = tensor.matmul(q, tensor.transpose(k))
        weights = ops.masked_softmax(logits)
        assert np.allclose(weights.array, 1.0 / 6.0, atol=1e-15)

    def test_masked_weights_exactly_zero_and_visible_sum_to_one(self):
        logits = Tensor(rng(5).normal(size=(3, 4)))
        mask = np.array([True, False, True, False])
        w = ops.masked_softmax(logits, mask)
        assert np.all(w.array[:, [1, 3]] == 0.0)
        assert np.allclose(w.array.sum(axis=1), 1.0, atol=1e-12)

    def test_all_masked_row_rejected(self):
        with pytest.raises(DegenerateMaskError):
            ops.masked_softmax(Tensor(np.zeros((2, 3))), np.zeros(3, dtype=bool))

    def test_output_invariant_to_masked_value_rows(self):
        r = rng(9)
        q, k = Tensor(r.normal(size=(2, 4))), Tensor(r.normal(size=(4, 4)))
        v1 = r.normal(size=(4, 4))
        v2 = v1.copy()
        v2[1] = 1e6
        v2[3] = -1e6
        mask = np.array([True, False, True, False])
        out1 = ops.masked_attention(q, k, Tensor(v1), mask)
        out2 = ops.masked_attention(q, k, Tensor(v2), mask)
        assert np.array_equal(out1.array, out2.array)

    def test_masked_key_rows_do_not_receive_gradient(self):
        r = rng(13)
        q = Tensor(r.normal(size=(2, 4)), requires_grad=True)
        k = Tensor(r.normal(size=(4, 4)), requires_grad=True)
        v = Tensor(r.normal(size=(4, 4)), requires_grad=True)
        mask = np.array([True, False, True, True])
        tensor.tsum(ops.masked_attention(q, k, v, mask)).backward()
        assert np.all(v.grad_array[1] == 0.0)
        assert np.all(k.grad_array[1] == 0.0)

    def test_gradients(self):
        r = rng(17)
        q = Tensor(r.normal(size=(3, 4)), requires_grad=True)
        k = Tensor(r.normal(size=(5, 4)), requires_grad=True)
        v = Tensor(r.normal(size=(5, 4)), requires_grad=True)
        mask = np.array([True, False, True, True, False])
        err = check_gradients(lambda: tensor.tsum(ops.masked_attention(q, k, v, mask)), [q, k, v])
        assert err < 1e-3


class TestElementwiseOps:
    def test_layer_norm_constant_vector_is_zero_before_affine(self):
        x = Tensor(np.full((2, 8), 3.25))
        gain = Tensor(np.ones(8))
        bias = Tensor(np.zeros(8))
        assert np.all(ops.layer_norm(x, gain, bias).array == 0.0)

    def test_layer_norm_normalizes(self):
        x = Tensor(rng(23).normal(size=(4, 16)))
        out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        assert np.allclose(out.array.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.array.var(axis=-1), 1.0, atol=1e-3)

    def test_gelu_zero(self):
        assert ops.gelu(Tensor([0.0])).item() == 0.0

    def test_embed_round_trip(self):
        table = Tensor(rng(29).normal(size=(10, 4)))
        for i in (0, 3, 9):
            assert np.array_equal(ops.embed([i], table).array[0], table.array[i])

    def test_embed_gradient_scatters(self):
        table = Tensor(rng(31).normal(size=(6, 3)), requires_grad=True)
        tensor.tsum(ops.embed([2, 2, 4], table)).backward()
        g = table.grad_array
        assert np.all(g[2] == 2.0) and np.all(g[4] == 1.0)
        assert np.all(g[[0, 1, 3, 5]] == 0.0)

    def test_l2_normalize_unit_norm(self):
        x = Tensor(rng(37).normal(size=(5, 8)))
        norms = np.linalg.norm(ops.l2_normalize(x).array, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    @pytest.mark.parametrize(
        "build",
        [
            lambda x: tensor.tsum(ops.gelu(x)),
            lambda x: tensor.tsum(ops.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))),
            lambda x: tensor.tsum(ops.l2_normalize(x)),
            lambda x: tensor.tsum(tensor.sigmoid(x)),
            lambda x: tensor.tsum(tensor.exp(tensor.scale(x, 0.1))),
            lambda x: tensor.tsum(tensor.absolute(x)),
            lambda x: tensor.tsum(tensor.maximum(x, Tensor(np.zeros((3, 6))))),
            lambda x: tensor.tsum(tensor.minimum(x, Tensor(np.full((3, 6), 0.3)))),
            lambda x: tensor.tsum(tensor.slice_cols(x, 1, 4)),
            lambda x: tensor.tsum(tensor.take_rows(x, [0, 2, 2])),
            lambda x: tensor.mean(tensor.transpose(x)),
        ],
        ids=[
            "gelu", "layer_norm", "l2_normalize", "sigmoid", "exp", "abs",
            "maximum", "minimum", "slice_cols", "take_rows", "transpose",
        ],
    )
    def test_op_gradients(self, build):
        x = Tensor(rng(41).normal(size=(3, 6)), requires_grad=True)
        assert check_gradients(lambda: build(x), [x]) < 1e-3

    def test_concat_gradients(self):
        r = rng(43)
        a = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(r.normal(size=(1, 3)), requires_grad=True)
        c = Tensor(r.normal(size=(3,)), requires_grad=True)
        err = check_gradients(
            lambda: tensor.tsum(tensor.mul(m := tensor.concat_rows([a, b, c]), m)), [a, b, c]
        )
        assert err < 1e-3


class TestCheckGradients:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        err = check_gradients(lambda: tensor.tsum(tensor.mul(x, x)), [x])
        assert err < 1e-6
        tensor.tsum(tensor.mul(x, x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_constant_function_has_zero_gradient(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        err = check_gradients(lambda: Tensor(np.array(5.0)), [x])
        assert err == 0.0


class TestDeterminism:
    def test_bit_identical_forward_and_gradients(self):
        def run():
            r = rng(1234)
            a = Tensor(r.normal(size=(4, 4)), requires_grad=True)
            b = Tensor(r.normal(size=(4, 4)), requires_grad=True)
            loss = ops.softmax_cross_entropy(tensor.matmul(ops.gelu(a), b), [0, 1, 2, 3])
            loss.backward()
            return loss.item(), a.grad.copy(), b.grad.copy()

        v1, ga1, gb1 = run()
        v2, ga2, gb2 = run()
        assert v1 == v2
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_matmul_chain_gradients(n, m, p, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(n, m)), requires_grad=True)
    b = Tensor(r.normal(size=(m, p)), requires_grad=True)

    def f():
        prod = tensor.matmul(a, b)
        return tensor.tsum(ops.gelu(prod))

    assert check_gradients(f, [a, b]) < 1e-3


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=2, max_value=6),
    st.integers(min_value=2, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_softmax_rows_sum_to_one(rows, cols, seed):
    r = np.random.default_rng(seed)
    logits = Tensor(r.normal(size=(rows, cols)) * 3)
    mask = r.random((rows, cols)) < 0.7
    mask[~mask.any(axis=1), 0] = True  # keep every row non-degenerate
    w = ops.masked_softmax(logits, mask)
    assert np.allclose(w.array.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w.array[~mask] == 0.0)
