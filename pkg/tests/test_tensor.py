import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualstream.gradcheck import numeric_gradient, relative_error
from dualstream.tensor import (
    ContractViolation,
    DimensionError,
    Graph,
    Tensor,
    backward,
    concat_cols,
    concat_rows,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    scaled_dot_attention,
    slice_rows,
    softmax_rows,
    sum_all,
    take_rows,
    transpose,
    weighted_sum,
)

FD_TOL = 1e-5


def fd_check(build, inputs, weights, h=1e-6):
    """Max relative error of autodiff vs central differences for sum(weights * build(*inputs))."""
    w = Tensor(weights)

    def loss():
        out = build(*inputs)
        return sum_all(out * w) if out.data.size > 1 else out

    with Graph() as g:
        value = loss()
    backward(value, g)
    worst = 0.0
    for t in inputs:
        num = numeric_gradient(lambda: loss().item(), t, h)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def rand(r, *shape):
    return Tensor(r.normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_small_product(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_4x5_by_5x2(self, rng):
        a, b = rand(rng, 4, 5), rand(rng, 5, 2)
        assert fd_check(matmul, [a, b], rng.normal(size=(4, 2))) < 1e-6


class TestSoftmax:
    def test_equal_row_is_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor(np.full((2, 5), 3.7))).data, 0.2, rtol=0, atol=1e-15)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_large_inputs_stay_finite(self):
        out = softmax_rows(Tensor([[1000.0, 999.0, -1000.0]])).data
        assert np.isfinite(out).all()

    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    @settings(max_examples=80, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = softmax_rows(Tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(softmax_rows(Tensor(x + c)).data, y, rtol=0, atol=1e-12)

    def test_mask_zeroes_entries(self, rng):
        mask = np.array([[True, False, True], [False, True, False]])
        y = softmax_rows(Tensor(rng.normal(size=(2, 3))), mask).data
        assert (y[~mask] == 0.0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-15)


class TestConcat:
    def test_single_part_identity(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(concat_rows([a]).data, a.data)

    def test_rows_in_order(self, rng):
        a, b = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        out = concat_rows([Tensor(a), Tensor(b)])
        assert out.shape == (5, 4)
        np.testing.assert_array_equal(out.data, np.vstack([a, b]))

    def test_sum_gradient_is_ones(self, rng):
        a, b = rand(rng, 2, 3), rand(rng, 4, 3)
        with Graph() as g:
            loss = sum_all(concat_rows([a, b]))
        backward(loss, g)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            concat_rows([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))])

    def test_empty(self):
        with pytest.raises(ContractViolation):
            concat_rows([])


class TestAttention:
    def test_single_key_returns_value_row(self, rng):
        q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, np.repeat(v, 4, axis=0), atol=1e-15)

    def test_zero_query_gives_masked_mean(self, rng):
        k, v = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        mask = np.array([[True, True, False, True, False]] * 2)
        out = scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(k), Tensor(v), mask).data
        np.testing.assert_allclose(out, np.tile(v[mask[0]].mean(axis=0), (2, 1)), atol=1e-14)

    def test_masked_weights_exactly_zero(self, rng, backend):
        mask = rng.random((6, 7)) < 0.5
        mask[:, 3] = True
        _, w = multi_head_attention(rand(rng, 6, 8), rand(rng, 7, 8), rand(rng, 7, 8), mask, 2,
                                    return_weights=True)
        assert w.shape == (2, 6, 7)
        assert (w[:, ~mask] == 0.0).all()
        np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-14)

    def test_fully_masked_row_is_contract_violation(self, rng):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ContractViolation):
            scaled_dot_attention(rand(rng, 2, 2), rand(rng, 2, 2), rand(rng, 2, 2), mask)

    def test_head_divisibility(self, rng):
        with pytest.raises(DimensionError):
            multi_head_attention(rand(rng, 2, 6), rand(rng, 2, 6), rand(rng, 2, 6), None, 4)

    def test_gradient_3x2(self, rng, backend):
        q, k, v = rand(rng, 3, 2), rand(rng, 3, 2), rand(rng, 3, 2)
        assert fd_check(scaled_dot_attention, [q, k, v], rng.normal(size=(3, 2))) < 1e-6


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        p = np.eye(4)[[1, 3, 0]]
        assert cross_entropy(Tensor(p), [1, 3, 0]).item() == 0.0

    def test_uniform(self):
        assert cross_entropy(Tensor(np.full((3, 4), 0.25)), [0, 1, 2]).item() == pytest.approx(
            math.log(4), abs=1e-12)

    def test_matches_direct_recomputation(self, rng):
        p = rng.random((5, 6))
        p /= p.sum(axis=1, keepdims=True)
        t = rng.integers(6, size=5)
        expected = -sum(math.log(p[i, t[i]]) for i in range(5)) / 5
        assert cross_entropy(Tensor(p), t).item() == pytest.approx(expected, rel=1e-14)

    def test_target_out_of_range(self):
        with pytest.raises(ContractViolation):
            cross_entropy(Tensor(np.full((1, 3), 1 / 3)), [3])

    def test_clamped_probability_stays_finite(self):
        loss = cross_entropy(Tensor([[1.0, 0.0]]), [1]).item()
        assert loss == pytest.approx(-math.log(1e-12))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = rand(rng, 2, 2)
        with Graph() as g:
            loss = sum_all(w)
        backward(loss, g)
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_sum_of_product_matches_fd(self, rng):
        w, x = rand(rng, 3, 4), Tensor(rng.normal(size=(4, 2)))
        with Graph() as g:
            loss = sum_all(matmul(w, x))
        backward(loss, g)
        num = numeric_gradient(lambda: sum_all(matmul(w, x)).item(), w)
        assert relative_error(w.grad, num) < 1e-6

    def test_unreachable_gets_zero(self, rng):
        w, other = rand(rng, 2, 2), rand(rng, 3, 1)
        with Graph() as g:
            loss = sum_all(w)
            _ = other * 2.0
        backward(loss, g, params=[other])
        np.testing.assert_array_equal(other.grad, np.zeros((3, 1)))

    def test_repeated_calls_reset(self, rng):
        w = rand(rng, 2, 3)
        with Graph() as g:
            loss = sum_all(w * 3.0)
        backward(loss, g)
        backward(loss, g)
        np.testing.assert_array_equal(w.grad, np.full((2, 3), 3.0))

    def test_non_scalar_loss(self, rng):
        w = rand(rng, 2, 2)
        with Graph() as g:
            out = w * 2.0
        with pytest.raises(DimensionError):
            backward(out, g)

    def test_reused_tensor_accumulates(self, rng):
        w = rand(rng, 2, 2)
        with Graph() as g:
            loss = sum_all(w * w + w)
        backward(loss, g)
        np.testing.assert_allclose(w.grad, 2 * w.data + 1)

    def test_topological_order(self, rng):
        a, b = rand(rng, 2, 2), rand(rng, 2, 2)
        with Graph() as g:
            sum_all(matmul(a, b) + a)
        produced = set()
        for node in g.nodes:
            for t in node.inputs:
                assert t.node_id not in {n.output.node_id for n in g.nodes} or t.node_id in produced
            produced.add(node.output.node_id)

    def test_no_graph_no_recording(self, rng):
        a = rand(rng, 2, 2)
        out = a * 2.0
        assert not out.requires_grad

    def test_replay_determinism(self):
        def run():
            r = np.random.default_rng(3)
            a, b = rand(r, 3, 4), rand(r, 4, 4)
            with Graph() as g:
                loss = sum_all(softmax_rows(matmul(a, b)) * Tensor(r.normal(size=(3, 4))))
            backward(loss, g)
            return loss.item(), a.grad.copy(), b.grad.copy()

        first, second = run(), run()
        assert first[0] == second[0]
        np.testing.assert_array_equal(first[1], second[1])
        np.testing.assert_array_equal(first[2], second[2])

    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))


# every differentiable op, at least 20 random small shapes each
OPS = {
    "matmul": (lambda r, m, n: [rand(r, m, n), rand(r, n, m + 1)], matmul),
    "add_broadcast": (lambda r, m, n: [rand(r, m, n), rand(r, 1, n)], lambda a, b: a + b),
    "sub": (lambda r, m, n: [rand(r, m, n), rand(r, m, n)], lambda a, b: a - b),
    "mul": (lambda r, m, n: [rand(r, m, n), rand(r, m, n)], lambda a, b: a * b),
    "transpose": (lambda r, m, n: [rand(r, m, n)], transpose),
    "concat_rows": (lambda r, m, n: [rand(r, m, n), rand(r, n, n)], lambda a, b: concat_rows([a, b])),
    "concat_cols": (lambda r, m, n: [rand(r, m, n), rand(r, m, 2)], lambda a, b: concat_cols([a, b])),
    "slice_rows": (lambda r, m, n: [rand(r, m + 1, n)], lambda a: slice_rows(a, 1, a.shape[0])),
    "take_rows": (lambda r, m, n: [rand(r, m, n)], lambda a: take_rows(a, [0, a.shape[0] - 1, 0])),
    "gelu": (lambda r, m, n: [rand(r, m, n)], gelu),
    "layer_norm": (lambda r, m, n: [rand(r, m, n + 2), rand(r, 1, n + 2), rand(r, 1, n + 2)], layer_norm),
    "softmax_rows": (lambda r, m, n: [rand(r, m, n)], softmax_rows),
    "attention_2_heads": (lambda r, m, n: [rand(r, m, 4), rand(r, n, 4), rand(r, n, 4)],
                          lambda q, k, v: multi_head_attention(q, k, v, None, 2)),
    "weighted_sum": (lambda r, m, n: [rand(r, m, n), rand(r, m, n)],
                     lambda a, b: weighted_sum([(0.3, a), (-1.7, b)])),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_random_shapes(op, backend):
    make, fn = OPS[op]
    r = np.random.default_rng(zlib.crc32(op.encode()))
    worst = 0.0
    for _ in range(20):
        m, n = (int(x) for x in r.integers(1, 5, size=2))
        inputs = make(r, m, n)
        out_shape = fn(*inputs).shape
        worst = max(worst, fd_check(fn, inputs, r.normal(size=out_shape)))
    assert worst < FD_TOL


def test_cross_entropy_gradient(rng):
    logits = rand(rng, 4, 5)
    t = [0, 4, 2, 2]
    assert fd_check(lambda x: cross_entropy(softmax_rows(x), t), [logits], np.ones(())) < FD_TOL
