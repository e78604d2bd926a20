"""Tape-based reverse-mode differentiation: primitives, replay and gradient checks."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celldiff import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central differences of a numpy scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestForward:
    def test_relu_values(self):
        rec = ad.Record()
        y = ad.relu(rec.input([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y.value, [0.0, 0.0, 2.0])

    def test_layernorm_constant_vector_is_zero(self):
        rec = ad.Record()
        y = ad.layer_norm(rec.input(np.full((2, 5), 3.7)))
        np.testing.assert_array_equal(y.value, np.zeros((2, 5)))

    def test_softmax_symmetric(self):
        rec = ad.Record()
        np.testing.assert_allclose(ad.softmax(rec.input([0.0, 0.0])).value, [0.5, 0.5])

    def test_softmax_large_logits_stay_finite(self):
        rec = ad.Record()
        y = ad.softmax(rec.input([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(y.value))
        np.testing.assert_allclose(y.value.sum(), 1.0)

    def test_pairwise_distance(self):
        rec = ad.Record()
        x = rec.input([[0.0, 0.0], [3.0, 4.0]])
        np.testing.assert_allclose(ad.pairwise_distance(x, x).value, [[0.0, 5.0], [5.0, 0.0]])

    def test_split_concat_roundtrip(self):
        rec = ad.Record()
        x = rec.input(np.arange(12.0).reshape(2, 6))
        a, b = ad.split(x, [2, 4])
        np.testing.assert_array_equal(ad.concat([a, b]).value, x.value)

    def test_everything_is_float64(self):
        rec = ad.Record()
        x = rec.input(np.ones(3, dtype=np.float32))
        assert (x * x).value.dtype == np.float64


class TestShapeErrors:
    def test_matmul_mismatch_rejected(self):
        rec = ad.Record()
        with pytest.raises(ad.ShapeError):
            rec.input(np.ones((4, 5))) @ rec.input(np.ones((4, 3)))
        assert rec.nodes == []

    def test_add_incompatible(self):
        rec = ad.Record()
        with pytest.raises(ad.ShapeError):
            rec.input(np.ones(3)) + rec.input(np.ones(4))

    def test_bad_split(self):
        rec = ad.Record()
        with pytest.raises(ad.ShapeError):
            ad.split(rec.input(np.ones((2, 5))), [2, 2])

    def test_seed_shape_mismatch(self):
        rec = ad.Record()
        x = rec.input(np.ones(3))
        y = x * x
        with pytest.raises(ad.ShapeError):
            rec.backward(y, seed=np.ones(4))

    def test_non_scalar_requires_seed(self):
        rec = ad.Record()
        x = rec.input(np.ones(3))
        with pytest.raises(ad.ShapeError):
            rec.backward(x * x)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_rejected(self):
        rec = ad.Record()
        with pytest.raises(ad.NonFiniteError):
            ad.log(rec.input([0.0]))


class TestBackward:
    def test_square(self):
        rec = ad.Record()
        x = rec.input([3.0])
        (g,) = rec.backward((x * x).sum(), wrt=[x])
        np.testing.assert_allclose(g, [6.0])

    def test_relu_subgradient(self):
        rec = ad.Record()
        x = rec.input([-1.0, 2.0])
        (g,) = rec.backward(ad.relu(x).sum(), wrt=[x])
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_fan_out_accumulates(self):
        rec = ad.Record()
        x = rec.input([2.0])
        y = (x * x + x * 3.0 + x).sum()
        (g,) = rec.backward(y, wrt=[x])
        np.testing.assert_allclose(g, [2 * 2.0 + 3.0 + 1.0])

    def test_matmul_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        A, B = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        W = rng.standard_normal((4, 3))
        rec = ad.Record()
        a, b = rec.input(A), rec.input(B)
        ga, gb = rec.backward((a @ b) * W, seed=np.ones((4, 3)), wrt=[a, b])
        fa = numeric_grad(lambda M: float(((M @ B) * W).sum()), A)
        fb = numeric_grad(lambda M: float(((A @ M) * W).sum()), B)
        np.testing.assert_allclose(ga, fa, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gb, fb, rtol=1e-6, atol=1e-8)

    def test_backward_grad_covers_all_inputs(self):
        rec = ad.Record()
        x, y = rec.input([1.0, 2.0]), rec.input([3.0, 4.0])
        rec.mark_output((x * y).sum())
        gx, gy = ad.backward_grad(rec, np.array(1.0))
        np.testing.assert_allclose(gx, [3.0, 4.0])
        np.testing.assert_allclose(gy, [1.0, 2.0])

    def test_stop_gradient_blocks_exactly(self):
        rec = ad.Record()
        x = rec.input([1.5, -2.0])
        y = (ad.stop_gradient(x * x) * x).sum()
        (g,) = rec.backward(y, wrt=[x])
        np.testing.assert_array_equal(g, x.value**2)

    def test_coincident_points_have_zero_distance_gradient(self):
        rec = ad.Record()
        x = rec.input([[1.0, 2.0], [1.0, 2.0]])
        (g,) = rec.backward(ad.pairwise_distance(x, x).sum(), wrt=[x])
        np.testing.assert_array_equal(g, np.zeros((2, 2)))


# name -> (builder on one leaf, input sampler); positive inputs where needed
def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


PRIMITIVE_CASES = {
    "add": (lambda x: (x + x * 0.5).sum(), None),
    "broadcast_add": (lambda x: (x + x.record.constant(np.arange(4.0))).sum(), None),
    "broadcast_mul": (lambda x: (x * x.sum(axis=0, keepdims=True)).sum(), None),
    "matmul": (lambda x: (x @ x.transpose()).sum(), None),
    "batched_matmul": (lambda x: (x.reshape(2, 3, 2) @ x.reshape(2, 2, 3)).mean(), None),
    "transpose": (lambda x: (x.transpose() * x.record.constant(np.arange(12.0).reshape(4, 3))).sum(), None),
    "reshape": (lambda x: (x.reshape(4, 3) * x.record.constant(np.arange(12.0).reshape(4, 3))).sum(), None),
    "concat_split": (lambda x: (ad.concat(ad.split(x, [1, 3])[::-1]) * x).sum(), None),
    "sum_axis": (lambda x: (x.sum(axis=1) * x.sum(axis=1)).sum(), None),
    "mean_axis": (lambda x: (x.mean(axis=0) * x.mean(axis=0)).sum(), None),
    "sqrt": (lambda x: ad.sqrt(x).sum(), _pos),
    "exp": (lambda x: ad.exp(x).sum(), None),
    "log": (lambda x: ad.log(x).sum(), _pos),
    "relu": (lambda x: (ad.relu(x) * x).sum(), None),
    "layernorm": (lambda x: (ad.layer_norm(x) * x.record.constant(np.arange(12.0).reshape(3, 4))).sum(), None),
    "softmax": (lambda x: (ad.softmax(x) * x.record.constant(np.arange(12.0).reshape(3, 4))).sum(), None),
    "cdist": (lambda x: ad.pairwise_distance(x, x * 2.0 + 1.0).sum(), None),
    "scalar_division": (lambda x: (x / 4.0 - x * x / 3.0).sum(), None),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_matches_central_differences(self, name):
        fn, sampler = PRIMITIVE_CASES[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        point = (sampler or (lambda r, s: r.standard_normal(s)))(rng, (3, 4))
        assert ad.check_gradients(fn, point, step=1e-6) < 1e-6

    def test_check_gradients_exact_for_linear(self):
        w = np.arange(1.0, 7.0).reshape(2, 3)
        err = ad.check_gradients(lambda x: (x * x.record.constant(w)).sum(), np.ones((2, 3)))
        assert err < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_random_mlp_gradient(self, n, d, seed):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((d, 3))

        def f(x):
            h = ad.layer_norm(x @ x.record.constant(W) + 0.1)
            return (ad.softmax(h) * h).sum()

        assert ad.check_gradients(f, rng.standard_normal((n, d))) < 1e-6


class TestReplay:
    def test_replay_bit_identical(self):
        rng = np.random.default_rng(3)
        rec = ad.Record()
        x = rec.input(rng.standard_normal((5, 4)))
        y = rec.mark_output(ad.softmax(ad.layer_norm(x @ x.transpose())).sum())
        first = ad.forward_eval(rec, [x.value])[0].copy()
        second = ad.forward_eval(rec, [x.value])[0]
        assert first.tobytes() == second.tobytes() == y.value.tobytes()

    def test_replay_new_inputs(self):
        rec = ad.Record()
        x = rec.input([1.0, 2.0])
        rec.mark_output((x * x).sum())
        (out,) = ad.forward_eval(rec, [np.array([3.0, 4.0])])
        assert float(out) == 25.0

    def test_replay_rejects_wrong_shape(self):
        rec = ad.Record()
        x = rec.input([1.0, 2.0])
        rec.mark_output((x * x).sum())
        with pytest.raises(ad.ShapeError):
            ad.forward_eval(rec, [np.ones(3)])

    def test_records_are_topologically_ordered(self):
        rec = ad.Record()
        x = rec.input(np.ones((2, 2)))
        ad.relu(x @ x + x).sum()
        for node in rec.nodes:
            assert all(i < node.output for i in node.inputs)

    def test_cross_record_mixing_rejected(self):
        a, b = ad.Record(), ad.Record()
        with pytest.raises(ValueError):
            a.input([1.0]) + b.input([1.0])
