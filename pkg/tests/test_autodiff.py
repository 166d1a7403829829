import math

import numpy as np
import pytest

from gmflow import autodiff as ad
from gmflow.autodiff import (
    ConfigError,
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    bilinear_sample,
    concat,
    conv2d,
    constant,
    matmul,
    pad2d,
    parameter,
    roll,
    softmax,
    stack,
    take_rows,
)
from gmflow.gradcheck import grad_check


def conv2d_reference(x, k, stride, padding):
    """Direct nested-loop convolution, the independent oracle for conv2d."""
    o, c, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[1:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((o, ho, wo), dtype=np.float64)
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ic, i * stride + a, j * stride + b] * k[oc, ic, a, b]
                out[oc, i, j] = acc
    return out


def check_op_gradients(build, params, seed=0, step=1e-6, tol=1e-5):
    """Gradcheck helper: project the op output onto a fixed random direction
    so every output coordinate influences the scalar."""
    rng = np.random.default_rng(seed)
    out = build(params)
    proj = constant(rng.standard_normal(out.shape))

    def f(ps):
        return (build(ps) * proj).sum()

    report = grad_check(f, params, step=step, tolerance=tol)
    assert report.passed, report.summary()


class TestElementwise:
    def test_add_mul_values(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 4.0])
        np.testing.assert_allclose((a + b).data, [4.0, 6.0])
        np.testing.assert_allclose((a * b).data, [3.0, 8.0])
        np.testing.assert_allclose((a - b).data, [-2.0, -2.0])
        np.testing.assert_allclose((a / b).data, [1 / 3, 0.5])

    def test_broadcasting_gradients(self):
        rng = np.random.default_rng(3)
        a = parameter(rng.standard_normal((4, 3)), dtype=np.float64)
        b = parameter(rng.standard_normal((3,)), dtype=np.float64)
        check_op_gradients(lambda p: p["a"] * p["b"] + p["b"], {"a": a, "b": b})

    def test_scalar_coercion_keeps_dtype(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        assert (a * 2.0).dtype == np.float32
        assert (1.0 + a).dtype == np.float32


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = Tensor(rng.standard_normal((3, 4)))
        eye = Tensor(np.eye(3))
        np.testing.assert_allclose(matmul(eye, b).data, b.data, rtol=1e-6)

    def test_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_allclose(matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(a, b)

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(7)
        a = parameter(rng.standard_normal((4, 5)), dtype=np.float64)
        b = parameter(rng.standard_normal((5, 3)), dtype=np.float64)
        loss = matmul(a, b).sum()
        backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, rtol=1e-12)
        # and the independent finite-difference oracle agrees
        a2 = parameter(a.data.copy(), dtype=np.float64)
        b2 = parameter(b.data.copy(), dtype=np.float64)
        report = grad_check(
            lambda p: matmul(p["a"], p["b"]).sum(), {"a": a2, "b": b2}, step=1e-5
        )
        assert report.passed, report.summary()

    def test_batched_matmul_gradients(self):
        rng = np.random.default_rng(11)
        a = parameter(rng.standard_normal((3, 2, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((3, 4, 5)), dtype=np.float64)
        check_op_gradients(lambda p: matmul(p["a"], p["b"]), {"a": a, "b": b})

    def test_broadcast_batch_against_2d(self):
        rng = np.random.default_rng(12)
        a = parameter(rng.standard_normal((3, 2, 4)), dtype=np.float64)
        w = parameter(rng.standard_normal((4, 5)), dtype=np.float64)
        check_op_gradients(lambda p: matmul(p["a"], p["w"]), {"a": a, "w": w})


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_analytic(self):
        out = softmax(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-6)

    def test_stabilized_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((6, 9)) * 30)
        out = softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert (out.data >= 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([np.inf, 0.0]))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = parameter(rng.standard_normal((4, 5)), dtype=np.float64)
        check_op_gradients(lambda p: softmax(p["x"], axis=1), {"x": x})


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 5, 5)))
        k = Tensor(np.eye(2).reshape(2, 2, 1, 1))
        out = conv2d(x, k, stride=1, padding=0)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_averaging_on_constant(self):
        x = Tensor(np.full((1, 6, 6), 3.5))
        k = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = conv2d(x, k, stride=1, padding=0)
        np.testing.assert_allclose(out.data, 3.5, rtol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_against_loop_reference(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((3, 7, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride, padding)
        ref = conv2d_reference(x, k, stride, padding)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((5, 3, 3, 3))
        full = conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        for n in range(2):
            single = conv2d(Tensor(x[n]), Tensor(k), stride=2, padding=1).data
            np.testing.assert_allclose(full[n], single, rtol=1e-6)

    def test_parameter_errors(self):
        x = Tensor(np.zeros((1, 4, 4)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            conv2d(x, k, stride=0, padding=0)
        with pytest.raises(ConfigError):
            conv2d(x, k, stride=1, padding=-1)
        with pytest.raises(ConfigError):
            conv2d(x, Tensor(np.zeros((1, 1, 9, 9))), stride=1, padding=0)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_gradients(self, stride, padding):
        rng = np.random.default_rng(21)
        x = parameter(rng.standard_normal((2, 5, 6)), dtype=np.float64)
        k = parameter(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
        check_op_gradients(
            lambda p: conv2d(p["x"], p["k"], stride=stride, padding=padding),
            {"x": x, "k": k},
        )


class TestBilinearSample:
    def test_identity_grid_is_exact(self):
        rng = np.random.default_rng(2)
        feat = Tensor(rng.standard_normal((3, 4, 5)))
        ys, xs = np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij")
        coords = Tensor(np.stack([xs, ys], axis=-1))
        out = bilinear_sample(feat, coords)
        np.testing.assert_array_equal(out.data, feat.data)

    def test_linear_midpoint(self):
        feat = Tensor(np.array([[[2.0, 4.0]]]))  # (1, 1, 2)
        coords = Tensor(np.array([[[0.5, 0.0]]]))
        out = bilinear_sample(feat, coords)
        np.testing.assert_allclose(out.data, [[[3.0]]])

    def test_far_outside_is_zero(self):
        feat = Tensor(np.ones((2, 3, 3)))
        coords = Tensor(np.array([[[-10.0, -10.0]]]))
        out = bilinear_sample(feat, coords)
        np.testing.assert_array_equal(out.data, np.zeros((2, 1, 1)))

    def test_partial_support_blends_with_zero(self):
        feat = Tensor(np.full((1, 3, 3), 2.0))
        coords = Tensor(np.array([[[-0.5, 0.0]]]))
        out = bilinear_sample(feat, coords)
        np.testing.assert_allclose(out.data, [[[1.0]]])

    def test_gradients(self):
        rng = np.random.default_rng(13)
        feat = parameter(rng.standard_normal((2, 5, 6)), dtype=np.float64)
        # keep coordinates away from integers so the kink never flips
        coords = parameter(
            rng.uniform(-0.6, 5.4, size=(3, 4, 2)).round(1) + 0.23, dtype=np.float64
        )
        check_op_gradients(
            lambda p: bilinear_sample(p["f"], p["c"]), {"f": feat, "c": coords}
        )


class TestShapeOps:
    def test_roll_inverts(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((4, 6)))
        rolled = roll(x, (1, -2), (0, 1))
        back = roll(rolled, (-1, 2), (0, 1))
        np.testing.assert_array_equal(back.data, x.data)

    def test_structural_gradients(self):
        rng = np.random.default_rng(14)
        x = parameter(rng.standard_normal((3, 4, 5)), dtype=np.float64)
        builders = {
            "reshape": lambda p: p["x"].reshape(12, 5),
            "transpose": lambda p: p["x"].transpose(2, 0, 1),
            "roll": lambda p: roll(p["x"], (1, 2), (1, 2)),
            "slice": lambda p: p["x"][1:, :2, ::2],
            "pad": lambda p: pad2d(p["x"], ((1, 2), (0, 1))),
            "sum0": lambda p: p["x"].sum(axis=0),
            "mean_keep": lambda p: p["x"].mean(axis=(1, 2), keepdims=True),
            "stack": lambda p: stack([p["x"], p["x"] * 2.0], axis=1),
            "concat": lambda p: concat([p["x"], p["x"][::-1]], axis=0),
        }
        for name, build in builders.items():
            check_op_gradients(build, {"x": x}, seed=hash(name) % 2**31)

    def test_take_rows_gradients(self):
        rng = np.random.default_rng(15)
        mat = parameter(rng.standard_normal((6, 3)), dtype=np.float64)
        idx = rng.integers(0, 6, size=(4, 5))
        check_op_gradients(lambda p: take_rows(p["m"], idx), {"m": mat})


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = parameter(np.array([1.0, 2.0, 3.0]))
        backward(p.sum())
        np.testing.assert_array_equal(p.grad, np.ones(3, dtype=np.float32))

    def test_sum_of_squares(self):
        p = parameter(np.array([1.0, 2.0]))
        backward((p * p).sum())
        np.testing.assert_allclose(p.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        p = parameter(np.ones(3))
        with pytest.raises(GraphError):
            backward(p * 2.0)

    def test_stale_graph_rejected(self):
        p = parameter(np.ones(3))
        loss = (p * p).sum()
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_shared_node_accumulates(self):
        p = parameter(np.array([3.0]), dtype=np.float64)
        y = p * p  # used twice below
        loss = (y + y).sum()
        backward(loss)
        np.testing.assert_allclose(p.grad, [12.0])

    def test_no_grad_suppresses_recording(self):
        p = parameter(np.ones(2))
        with ad.no_grad():
            out = (p * 3.0).sum()
        assert not out.requires_grad
        with pytest.raises(GraphError):
            backward(out)


class TestDeterminism:
    def test_repeat_runs_bitwise_identical(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        k = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)

        def run():
            xt = parameter(x.copy())
            out = conv2d(xt.reshape(1, 16, 16), Tensor(k), stride=1, padding=1)
            loss = (out * out).sum()
            backward(loss)
            return loss.item(), xt.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)
