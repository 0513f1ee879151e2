"""Kernel contracts: op semantics, backward correctness, stop-gradient."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakpair.autograd import Graph, GraphError, grad_check, relative_error


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestL2Normalize:
    def test_three_four_five(self):
        g = Graph()
        out = g.l2_normalize(g.constant([3.0, 4.0]))
        np.testing.assert_allclose(out.value, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_already_unit(self):
        g = Graph()
        out = g.l2_normalize(g.constant([1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(out.value, [1.0, 0.0, 0.0])

    def test_random_row_has_unit_norm(self):
        rng = np.random.default_rng(7)
        g = Graph()
        out = g.l2_normalize(g.constant(rng.normal(size=8)))
        assert abs(np.linalg.norm(out.value) - 1.0) <= 1e-12

    def test_zero_row_is_flagged_not_fixed(self):
        g = Graph()
        out = g.l2_normalize(g.constant([[0.0, 0.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.value[0], [0.0, 0.0])
        assert g.zero_norm_rows == [(out.id, (0,))]


class TestCosineMatrix:
    def test_orthogonal(self):
        g = Graph()
        out = g.cosine_matrix(g.constant([[1.0, 0.0]]), g.constant([[0.0, 1.0]]))
        np.testing.assert_array_equal(out.value, [[0.0]])

    def test_identical(self):
        g = Graph()
        out = g.cosine_matrix(g.constant([[1.0, 0.0]]), g.constant([[1.0, 0.0]]))
        np.testing.assert_array_equal(out.value, [[1.0]])

    def test_self_similarity_diagonal(self):
        rows = unit_rows(np.random.default_rng(0), 3, 2)
        g = Graph()
        out = g.cosine_matrix(g.constant(rows), g.constant(rows))
        np.testing.assert_allclose(np.diag(out.value), 1.0, rtol=0, atol=1e-9)

    def test_dimension_mismatch(self):
        g = Graph()
        with pytest.raises(GraphError):
            g.cosine_matrix(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 4))))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bounded_on_unit_rows(self, seed):
        rows = unit_rows(np.random.default_rng(seed), 5, 4)
        g = Graph()
        out = g.cosine_matrix(g.constant(rows), g.constant(rows)).value
        assert out.min() >= -1.0 - 1e-9 and out.max() <= 1.0 + 1e-9


class TestSoftmaxRows:
    def test_symmetry(self):
        g = Graph()
        np.testing.assert_array_equal(g.softmax_rows(g.constant([[0.0, 0.0]])).value,
                                      [[0.5, 0.5]])

    def test_large_logits_stable(self):
        g = Graph()
        out = g.softmax_rows(g.constant([[1000.0, 0.0]])).value
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], rtol=0, atol=1e-300)

    def test_random_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        g = Graph()
        out = g.softmax_rows(g.constant(rng.normal(size=(4, 4)))).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e6))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one_up_to_huge_entries(self, seed, scale):
        logits = scale * np.random.default_rng(seed).uniform(-1, 1, size=(3, 5))
        g = Graph()
        out = g.softmax_rows(g.constant(logits)).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-9)


class TestBackward:
    def test_square(self):
        g = Graph()
        x = g.leaf(3.0, trainable=True)
        assert g.backward(g.mul(x, x))[x] == 6.0

    def test_detach_blocks_gradient(self):
        g = Graph()
        x = g.leaf(3.0, trainable=True)
        assert g.backward(g.mul(g.detach(x), x))[x] == 3.0

    def test_detach_gradient_is_exactly_zero(self):
        g = Graph()
        x = g.leaf([1.0, -2.0], trainable=True)
        loss = g.sum(g.mul(g.detach(x), g.constant([5.0, 7.0])))
        np.testing.assert_array_equal(g.backward(loss)[x], [0.0, 0.0])

    def test_unused_leaf_gets_zero_gradient(self):
        g = Graph()
        x = g.leaf(2.0, trainable=True)
        y = g.leaf([1.0, 1.0], trainable=True)
        grads = g.backward(g.mul(x, x))
        np.testing.assert_array_equal(grads[y], [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.leaf([1.0, 2.0], trainable=True)
        with pytest.raises(GraphError):
            g.backward(g.mul(x, x))

    def test_two_layer_encoder_contrastive_gradient(self):
        """Encoder + contrastive loss matches finite differences."""
        rng = np.random.default_rng(11)
        raw = rng.normal(size=(3, 4))
        params = {"w1": rng.normal(0.0, 0.5, size=(4, 5)), "b1": rng.normal(size=5),
                  "w2": rng.normal(0.0, 0.5, size=(5, 3)), "b2": rng.normal(size=3)}

        def loss_fn(g, lv):
            h = g.tanh(g.affine(g.constant(raw), lv["w1"], lv["b1"]))
            emb = g.l2_normalize(g.affine(h, lv["w2"], lv["b2"]))
            scores = g.softmax_rows(g.mul(g.cosine_matrix(emb, emb), 1.0 / 0.2))
            diag = g.sum_rows(g.mul(scores, g.constant(np.eye(3))))
            return g.mul(g.mean(g.log(diag)), -1.0)

        report = grad_check(loss_fn, params, eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_error


class TestGradCheck:
    def test_linear_model_squared_loss_is_near_exact(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))

        def loss_fn(g, lv):
            r = g.add(g.affine(g.constant(x), lv["w"], lv["b"]), g.constant(-y))
            return g.mean(g.mul(r, r))

        report = grad_check(loss_fn, {"w": rng.normal(size=(3, 1)),
                                      "b": rng.normal(size=1)})
        assert report.max_rel_error < 1e-8

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            grad_check(lambda g, lv: g.sum(lv["x"]), {"x": np.ones(2)}, eps=1e-2)

    def test_detach_constant_substitution(self):
        """Gradients with detach equal those with the value as a literal."""
        rng = np.random.default_rng(5)
        value = rng.normal(size=(2, 3))

        g1 = Graph()
        x1 = g1.leaf(value, trainable=True)
        detached_inner = g1.detach(g1.tanh(x1))
        loss1 = g1.sum(g1.mul(detached_inner, g1.mul(x1, x1)))
        grad1 = g1.backward(loss1)[x1]

        g2 = Graph()
        x2 = g2.leaf(value, trainable=True)
        loss2 = g2.sum(g2.mul(g2.constant(np.tanh(value)), g2.mul(x2, x2)))
        grad2 = g2.backward(loss2)[x2]
        np.testing.assert_array_equal(grad1, grad2)


class TestShapesAndSugar:
    def test_scalar_broadcast(self):
        g = Graph()
        x = g.leaf([[1.0, 2.0], [3.0, 4.0]], trainable=True)
        out = 2.0 * x + 1.0
        np.testing.assert_array_equal(out.value, [[3.0, 5.0], [7.0, 9.0]])
        np.testing.assert_array_equal(g.backward(g.sum(out))[x], np.full((2, 2), 2.0))

    def test_shape_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(GraphError):
            g.add(g.constant(np.ones(3)), g.constant(np.ones((3, 1))))

    def test_node_division_by_node_rejected(self):
        g = Graph()
        x, y = g.constant(1.0), g.constant(2.0)
        with pytest.raises(GraphError):
            x / y

    def test_cross_graph_use_rejected(self):
        a, b = Graph(), Graph()
        with pytest.raises(GraphError):
            b.add(a.constant(1.0), b.constant(1.0))


def test_relative_error_floor():
    err = relative_error(np.array([0.0]), np.array([5e-9]))
    np.testing.assert_allclose(err, [0.5])
