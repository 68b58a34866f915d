"""Tape engine: every op's adjoint against central differences, plus the
accumulation and error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorsplat import diffcore as dc
from conftest import numeric_grad

RNG = np.random.default_rng(0)


def check_op(build, *shapes, tol=1e-6, seed=0):
    """Compare autodiff of sum(w * build(*params)) with finite differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    out_w = None
    params = [dc.Param(x, "mlp", f"p{i}") for i, x in enumerate(xs)]
    out = build(*params)
    out_w = rng.normal(size=out.shape)
    dc.backward(dc.total(dc.mul(out, dc.constant(out_w))))
    for k, p in enumerate(params):
        def f(v, k=k):
            vals = [q.data for q in params]
            vals[k] = v
            ts = [dc.constant(a) for a in vals]
            return float((build(*ts).data * out_w).sum())
        num = numeric_grad(f, p.data)
        np.testing.assert_allclose(p.grad, num, rtol=tol, atol=tol)


class TestArithmetic:
    def test_add_sub_mul(self):
        check_op(dc.add, (3, 4), (3, 4))
        check_op(dc.sub, (3, 4), (3, 4))
        check_op(dc.mul, (3, 4), (3, 4))

    def test_scale_and_scalar(self):
        check_op(lambda a: dc.scale(a, -2.5), (4, 2))
        check_op(lambda a: dc.add_scalar(a, 3.0), (4, 2))

    def test_bias_and_row_scale(self):
        check_op(dc.add_bias, (5, 3), (3,))
        check_op(dc.row_scale, (5, 3), (5,))

    def test_matmul_linear_transpose(self):
        check_op(dc.matmul, (4, 3), (3, 5))
        check_op(dc.linear, (6, 3), (2, 3), (2,))
        check_op(dc.transpose, (3, 5))

    def test_reductions(self):
        check_op(lambda a: dc.reshape(dc.total(a), (1,)), (3, 4))
        check_op(lambda a: dc.reshape(dc.mean(a), (1,)), (3, 4))

    def test_shape_mismatch_raises(self):
        with pytest.raises(dc.DimensionError):
            dc.add(dc.constant(np.zeros(3)), dc.constant(np.zeros(4)))
        with pytest.raises(dc.DimensionError):
            dc.matmul(dc.constant(np.zeros((2, 3))), dc.constant(np.zeros((2, 3))))


class TestElementwise:
    @pytest.mark.parametrize("op", ["sigmoid", "softplus", "tanh", "exp"])
    def test_smooth_ops(self, op):
        check_op(lambda a: dc.elementwise(op, a), (4, 3))

    def test_relu_away_from_kink(self):
        x = RNG.normal(size=(5, 4))
        x[np.abs(x) < 0.05] = 0.5
        p = dc.Param(x, "mlp")
        dc.backward(dc.total(dc.relu(p)))
        np.testing.assert_array_equal(p.grad, (x > 0).astype(float))

    def test_sigmoid_extremes_are_finite(self):
        with np.errstate(over="raise"):
            y = dc.sigmoid(dc.constant(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0])

    def test_softplus_large_input(self):
        y = dc.softplus(dc.constant(np.array([800.0, -800.0]))).data
        np.testing.assert_allclose(y, [800.0, 0.0], atol=1e-12)


class TestShapeOps:
    def test_concat_cols(self):
        check_op(lambda a, b: dc.concat([a, b]), (3, 2), (3, 4))
        check_op(lambda a: dc.cols(a, 1, 3), (4, 5))

    def test_gather_with_repeats(self):
        check_op(lambda a: dc.gather_rows(a, [0, 2, 2, 1, 0]), (3, 4))

    def test_repeat_broadcast_tile(self):
        check_op(lambda a: dc.repeat_rows(a, 3), (2, 4))
        check_op(lambda v: dc.broadcast_row(v, 5), (3,))
        check_op(lambda a: dc.tile_cols(a, 3), (2, 4))
        check_op(lambda a: dc.reshape(a, (6, 2)), (3, 4))

    def test_softmax_and_normalize(self):
        check_op(dc.softmax_rows, (4, 6))
        check_op(lambda a: dc.normalize_rows(a), (4, 3))

    def test_normalize_fallback(self):
        x = np.array([[3.0, 4.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1e-12]])
        fb = np.array([1.0, 0.0, 0.0, 0.0])
        p = dc.Param(x, "mlp")
        y = dc.normalize_rows(p, fallback=fb)
        np.testing.assert_allclose(y.data, [[0.6, 0.8, 0, 0], [1, 0, 0, 0]])
        assert y.name == "normalized:1"
        dc.backward(dc.total(y))
        assert np.all(p.grad[1] == 0)

    def test_mlp_forward(self):
        w = dc.MlpWeights.init(np.random.default_rng(1), 5, 7, 3)
        x = np.random.default_rng(2).normal(size=(4, 5))
        h = np.maximum(x @ w.w1.data.T + w.b1.data, 0)
        np.testing.assert_allclose(dc.mlp_forward(w, dc.constant(x)).data, h @ w.w2.data.T + w.b2.data)
        with pytest.raises(dc.DimensionError):
            dc.mlp_forward(w, dc.constant(np.zeros((2, 4))))


class TestTape:
    def test_non_scalar_loss_rejected(self):
        with pytest.raises(dc.ContractError):
            dc.backward(dc.constant(np.zeros(3)))

    def test_param_grads_accumulate(self):
        p = dc.Param(np.array([1.0, 2.0]), "mlp")
        for _ in range(2):
            dc.backward(dc.total(dc.mul(p, p)))
        np.testing.assert_allclose(p.grad, 2 * 2 * p.data)
        p.zero_grad()
        assert np.all(p.grad == 0)

    def test_intermediates_reset_between_calls(self):
        p = dc.Param(np.array([1.0, 2.0]), "mlp")
        mid = dc.scale(p, 3.0)
        loss = dc.total(mid)
        dc.backward(loss)
        dc.backward(loss)
        np.testing.assert_allclose(mid.grad, [1.0, 1.0])
        np.testing.assert_allclose(p.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        p = dc.Param(np.array([0.3, -0.7]), "mlp")
        s = dc.sigmoid(p)
        dc.backward(dc.total(dc.add(s, dc.mul(s, s))))
        y = 1 / (1 + np.exp(-p.data))
        np.testing.assert_allclose(p.grad, (1 + 2 * y) * y * (1 - y))

    def test_unknown_group_rejected(self):
        with pytest.raises(ValueError):
            dc.Param(np.zeros(2), "nonsense")

    def test_backward_is_deterministic(self):
        def run():
            p = dc.Param(np.random.default_rng(5).normal(size=(50, 8)), "mlp")
            w = dc.MlpWeights.init(np.random.default_rng(6), 8, 16, 4)
            dc.backward(dc.total(dc.softmax_rows(dc.mlp_forward(w, p))))
            return p.grad.tobytes() + w.w1.grad.tobytes()
        assert run() == run()

    def test_precision_context(self):
        with dc.precision(np.float32):
            assert dc.constant([1.0]).data.dtype == np.float32
        assert dc.constant([1.0]).data.dtype == np.float64


class TestFiniteDiffCheck:
    def test_passes_on_correct_gradient(self):
        p = dc.Param(RNG.normal(size=(3, 3)), "mlp")
        err = dc.finite_diff_check(lambda: dc.total(dc.tanh(p)), [p])
        assert err < 1e-6

    def test_detects_wrong_gradient(self):
        p = dc.Param(RNG.normal(size=(3,)), "mlp")
        err = dc.finite_diff_check(lambda: dc.total(dc.exp(p)), [p], analytic=[np.exp(p.data) * 1.01])
        assert err > 5e-3

    def test_several_steps_tolerate_kink(self):
        # relu preactivation 3e-5 sits inside a 1e-4 step but outside 1e-5
        p = dc.Param(np.array([3e-5, 0.5]), "mlp")
        f = lambda: dc.total(dc.relu(p))
        assert dc.finite_diff_check(f, [p], eps=1e-4) > 0.1
        assert dc.finite_diff_check(f, [p], eps=(1e-4, 1e-5)) < 1e-8
        wrong = [np.array([1.2, 1.0])]
        assert dc.finite_diff_check(f, [p], eps=(1e-4, 1e-5), analytic=wrong) > 0.1

    def test_nonfinite_objective_raises(self):
        p = dc.Param(np.array([1.0]), "mlp")
        with pytest.raises(dc.EvaluationError):
            dc.finite_diff_check(lambda: dc.total(dc.scale(p, np.inf)), [p])

    def test_bad_eps(self):
        p = dc.Param(np.array([1.0]), "mlp")
        with pytest.raises(ValueError):
            dc.finite_diff_check(lambda: dc.total(p), [p], eps=0)


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=finite))
def test_softmax_rows_are_distributions(x):
    y = dc.softmax_rows(dc.constant(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_softplus_bounds(x):
    y = dc.softplus(dc.constant(x)).data
    assert np.all(y >= np.maximum(x, 0) - 1e-12)
    assert np.all(y <= np.maximum(x, 0) + np.log(2) + 1e-12)
