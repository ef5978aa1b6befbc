import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agglomerate.errors import ContractError, DimensionError, NumericError
from agglomerate.numerics import (Tape, Tensor, add, backward, bilinear_resize,
                                  cosine_loss, div, exp, gelu, layer_norm, log,
                                  log_softmax, matmul, mse_loss, mul,
                                  mul_scalar, reduce_mean, reduce_sum, relu,
                                  reshape, softmax, stack, sub, transpose,
                                  zero_grads)
from util import check_gradients, relative_error


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=np.float32).reshape(3, 3)
        out = matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 2, 2))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(3, 5))}
        check_gradients(lambda p: reduce_sum(matmul(p["a"], p["b"])), params,
                        total_probes=27, tol=1e-6)

    def test_batched_gradient(self):
        rng = np.random.default_rng(2)
        params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 3))}
        check_gradients(lambda p: mse_loss(matmul(p["a"], p["b"]),
                                           Tensor(np.zeros((2, 3, 3)))), params, total_probes=48)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_shift_invariance(self):
        for c in (-7.0, 0.0, 123.0):
            out = softmax(Tensor([c, c + float(np.log(2.0))], dtype=np.float64)).data
            np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)

    def test_extreme_logits_match_mpmath(self):
        import mpmath
        out = softmax(Tensor([1000.0, 0.0])).data
        exact = [float(mpmath.exp(0) / (mpmath.exp(0) + mpmath.exp(-1000))),
                 float(mpmath.exp(-1000) / (mpmath.exp(0) + mpmath.exp(-1000)))]
        np.testing.assert_allclose(out, np.float32(exact))
        assert np.all(np.isfinite(out))

    def test_empty_is_error(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 0))))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_simplex_property(self, logits):
        out = softmax(Tensor(np.array(logits, dtype=np.float64))).data
        assert out.min() > 0
        assert abs(out.sum() - 1.0) < 1e-6

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        params = {"x": rng.normal(size=(3, 5))}
        target = rng.normal(size=(3, 5))
        check_gradients(lambda p: reduce_sum(mul(softmax(p["x"]), Tensor(target))),
                        params, total_probes=15)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        assert abs(gelu(Tensor([12.0], dtype=np.float64)).data[0] - 12.0) < 1e-6
        assert abs(gelu(Tensor([-12.0], dtype=np.float64)).data[0]) < 1e-6

    def test_gradcheck_at_spec_points(self):
        params = {"x": np.array([-2.0, -0.5, 0.3, 4.0])}
        check_gradients(lambda p: reduce_sum(gelu(p["x"])), params, total_probes=8, tol=1e-6)


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        out = layer_norm(Tensor(np.full((2, 6), 3.7, dtype=np.float32)),
                         Tensor(np.ones(6, dtype=np.float32)),
                         Tensor(np.zeros(6, dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_mean_and_variance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(1.5, 2.0, size=(5, 16)).astype(np.float32)
        out = layer_norm(Tensor(x), Tensor(np.ones(16, dtype=np.float32)),
                         Tensor(np.zeros(16, dtype=np.float32))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        params = {"x": rng.normal(size=(3, 8)), "g": rng.normal(size=8), "b": rng.normal(size=8)}
        check_gradients(
            lambda p: mse_loss(layer_norm(p["x"], p["g"], p["b"]), Tensor(np.zeros((3, 8)))),
            params, total_probes=40, tol=1e-5)


class TestLosses:
    def test_mse_identical(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert mse_loss(x, Tensor(np.arange(6.0).reshape(2, 3))).item() == 0.0

    def test_mse_hand_case(self):
        assert mse_loss(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == pytest.approx(12.5)

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_mse_gradient_formula(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        ta, tb = t64(a, grad=True), t64(b, grad=True)
        with Tape() as tape:
            loss = mse_loss(ta, tb)
        backward(loss, tape)
        np.testing.assert_allclose(ta.grad, 2 * (a - b) / a.size, rtol=1e-12)
        check_gradients(lambda p: mse_loss(p["a"], Tensor(b)), {"a": a}, total_probes=12)

    def test_cosine_identical(self):
        # the epsilon in the denominator leaves a residual of order 1e-8
        x = np.random.default_rng(7).normal(size=(5, 4))
        assert cosine_loss(t64(x), t64(x.copy())).item() < 1e-7

    def test_cosine_orthogonal(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([[0.0, 3.0], [4.0, 0.0]])
        assert cosine_loss(t64(a), t64(b)).item() == pytest.approx(1.0)

    def test_cosine_scale_invariance(self):
        x = np.random.default_rng(8).normal(size=(6, 5))
        assert cosine_loss(t64(5 * x), t64(x.copy())).item() == pytest.approx(0.0, abs=1e-7)

    def test_cosine_gradcheck(self):
        rng = np.random.default_rng(9)
        params = {"a": rng.normal(size=(4, 6)), "b": rng.normal(size=(4, 6))}
        check_gradients(lambda p: cosine_loss(p["a"], p["b"]), params, total_probes=48)


class TestBackward:
    def test_sum_gives_ones(self):
        w = t64(np.zeros((3, 2)), grad=True)
        with Tape() as tape:
            loss = reduce_sum(w)
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_repeated_backward_accumulates(self):
        w = t64([1.0, 2.0], grad=True)
        with Tape() as tape:
            loss = reduce_sum(mul(w, w))
        backward(loss, tape)
        first = w.grad.copy()
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, 2 * first)

    def test_non_scalar_loss_rejected(self):
        w = t64([1.0, 2.0], grad=True)
        with Tape() as tape:
            out = mul(w, w)
        with pytest.raises(ContractError):
            backward(out, tape)

    def test_loss_from_other_tape_rejected(self):
        w = t64([1.0], grad=True)
        with Tape() as tape:
            loss = reduce_sum(w)
        with pytest.raises(ContractError):
            backward(loss, Tape())

    def test_composite_mlp_gradcheck(self):
        rng = np.random.default_rng(10)
        params = {"w1": rng.normal(size=(6, 8)), "b1": rng.normal(size=8),
                  "w2": rng.normal(size=(8, 3)), "b2": rng.normal(size=3)}
        x = rng.normal(size=(5, 6))
        y = rng.normal(size=(5, 3))

        def loss(p):
            h = gelu(add(matmul(Tensor(x), p["w1"]), p["b1"]))
            return mse_loss(add(matmul(h, p["w2"]), p["b2"]), Tensor(y))

        check_gradients(loss, params, total_probes=100)

    def test_zero_grads(self):
        w = t64([1.0], grad=True)
        with Tape() as tape:
            backward(reduce_sum(w), tape)
        assert w.grad is not None
        zero_grads([w])
        assert w.grad is None

    def test_disjoint_tapes_across_threads(self):
        errors = []

        def worker(seed):
            try:
                rng = np.random.default_rng(seed)
                w = t64(rng.normal(size=(8, 8)), grad=True)
                for _ in range(20):
                    with Tape() as tape:
                        loss = mse_loss(matmul(w, w), Tensor(np.zeros((8, 8))))
                    backward(loss, tape)
                    zero_grads([w])
            except Exception as exc:  # propagated to the main thread
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert not errors


class TestElementwiseOps:
    def test_add_trailing_broadcast(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        bias = np.array([1.0, 2.0, 3.0, 4.0])
        out = add(t64(x), t64(bias))
        np.testing.assert_array_equal(out.data, x + bias)
        with pytest.raises(DimensionError):
            add(t64(x), t64(np.zeros(3)))

    def test_add_broadcast_gradient(self):
        rng = np.random.default_rng(11)
        params = {"x": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=4),
                  "pos": rng.normal(size=(3, 4))}
        check_gradients(lambda p: mse_loss(add(add(p["x"], p["b"]), p["pos"]),
                                           Tensor(np.zeros((2, 3, 4)))), params, total_probes=36)

    @pytest.mark.parametrize("op", [sub, mul, div])
    def test_binary_gradchecks(self, op):
        rng = np.random.default_rng(12)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4)) + 3.0}
        check_gradients(lambda p: reduce_sum(op(p["a"], p["b"])), params, total_probes=24)

    def test_unary_gradchecks(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4))
        check_gradients(lambda p: reduce_sum(exp(mul_scalar(p["x"], 0.5))), {"x": x}, total_probes=12)
        check_gradients(lambda p: reduce_sum(log(exp(p["x"]))), {"x": x}, total_probes=12)
        away_from_kink = np.where(np.abs(x) < 0.1, 0.5, x)
        check_gradients(lambda p: reduce_sum(mul(relu(p["x"]), p["x"])),
                        {"x": away_from_kink}, total_probes=12)

    def test_shape_op_gradchecks(self):
        rng = np.random.default_rng(14)
        params = {"x": rng.normal(size=(2, 3, 4))}
        check_gradients(lambda p: reduce_sum(transpose(reshape(p["x"], (6, 4)), (1, 0))),
                        params, total_probes=10)
        check_gradients(lambda p: reduce_sum(mul(reduce_mean(p["x"], axes=(0, 2)),
                                                 Tensor(np.array([1.0, -2.0, 3.0])))),
                        params, total_probes=12)
        check_gradients(lambda p: reduce_sum(stack([reduce_sum(p["x"]), reduce_mean(p["x"])])),
                        params, total_probes=8)

    def test_log_softmax_gradcheck(self):
        rng = np.random.default_rng(15)
        target = rng.normal(size=(3, 5))
        check_gradients(lambda p: reduce_sum(mul(log_softmax(p["x"]), Tensor(target))),
                        {"x": rng.normal(size=(3, 5))}, total_probes=15)

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ContractError):
            add(Tensor([1.0], dtype=np.float32), Tensor([1.0], dtype=np.float64))


class TestNonFiniteGuards:
    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_overflow_aborts(self):
        with pytest.raises(NumericError):
            exp(Tensor([1e5]))

    def test_log_of_zero_aborts(self):
        with pytest.raises(NumericError):
            log(Tensor([0.0]))


class TestBilinearResize:
    def test_hand_oracle_2x2_to_3x3(self):
        g = Tensor(np.array([0.0, 1.0, 2.0, 3.0], dtype=np.float32).reshape(1, 2, 2, 1))
        out = bilinear_resize(g, 3, 3).data[0, :, :, 0]
        # values frozen from the hand bilinear computation on [[0,1],[2,3]]
        np.testing.assert_allclose(out, [[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
        assert out[1, 1] == 1.5

    def test_identity_is_bit_exact(self):
        x = np.random.default_rng(16).normal(size=(2, 5, 7, 3)).astype(np.float32)
        out = bilinear_resize(Tensor(x), 5, 7).data
        np.testing.assert_array_equal(out, x)

    def test_constant_grid_stays_constant(self):
        x = np.full((1, 3, 4, 2), 2.5, dtype=np.float32)
        for th, tw in ((1, 1), (2, 9), (8, 3)):
            out = bilinear_resize(Tensor(x), th, tw).data
            np.testing.assert_allclose(out, 2.5, rtol=1e-6)

    def test_convex_bounds(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(1, 4, 6, 3)).astype(np.float32)
        out = bilinear_resize(Tensor(x), 9, 5).data
        for c in range(3):
            assert out[..., c].min() >= x[..., c].min() - 1e-6
            assert out[..., c].max() <= x[..., c].max() + 1e-6

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        target = rng.normal(size=(1, 5, 6, 2))
        check_gradients(lambda p: mse_loss(bilinear_resize(p["x"], 5, 6), Tensor(target)),
                        {"x": rng.normal(size=(1, 3, 4, 2))}, total_probes=24)


def test_operations_are_deterministic():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(8, 16)).astype(np.float32)
    w = rng.normal(size=(16, 16)).astype(np.float32)
    a = matmul(softmax(Tensor(x)), Tensor(w)).data
    b = matmul(softmax(Tensor(x)), Tensor(w)).data
    np.testing.assert_array_equal(a, b)


def test_randomized_op_gradients_meet_spec_tolerance():
    # every differentiable op on randomized inputs, rel error < 1e-4 (f64)
    rng = np.random.default_rng(20)
    x = rng.normal(size=(3, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    target = rng.normal(size=(3, 6))
    cases = {
        "gelu": lambda p: reduce_sum(gelu(p["x"])),
        "softmax": lambda p: reduce_sum(mul(softmax(p["x"]), Tensor(target))),
        "layer_norm": lambda p: mse_loss(layer_norm(p["x"], Tensor(gain), Tensor(bias)),
                                         Tensor(target)),
        "cosine": lambda p: cosine_loss(p["x"], Tensor(target)),
        "mse": lambda p: mse_loss(p["x"], Tensor(target)),
    }
    for name, fn in cases.items():
        worst = check_gradients(fn, {"x": x.copy()}, total_probes=18)
        assert worst < 1e-4, name
