import numpy as np
import pytest

from satrefine import autodiff as ad
from satrefine.autodiff import Tensor
from satrefine.errors import ContractError, ShapeError, TrainingDivergenceError


def finite_diff(func, value, h=1e-6):
    """Central-difference gradient of scalar func w.r.t. a float64 array."""
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = func(value)
        flat[i] = orig - h
        lo = func(value)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_grad(build, value, h=1e-6, rtol=1e-4, atol=1e-6):
    """Compare reverse-mode gradient of build(param) against central differences."""
    param = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    loss = build(param)
    (got,) = ad.gradients(loss, [param])
    want = finite_diff(lambda v: build(Tensor(v, dtype=np.float64)).item(), value, h=h)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


RNG = np.random.default_rng(1234)


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_conv_of_ones_sums_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_clamp01_edges(self):
        out = ad.clamp01(Tensor([-0.5, 1.5, 0.25]))
        np.testing.assert_allclose(out.data, [0.0, 1.0, 0.25])

    def test_log_guard_keeps_finite(self):
        out = ad.log(Tensor([0.0]))
        assert np.isfinite(out.data).all()
        assert out.data[0] == pytest.approx(np.log(1e-12))

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (t + t).backward()


class TestGradientsAgainstFiniteDifferences:
    """Every op kind, at random points kept away from kinks."""

    def test_add_sub_mul_broadcast(self):
        for _ in range(10):
            a = RNG.normal(size=(3, 4))
            b = RNG.normal(size=(1, 4))
            check_grad(lambda t: ((t + Tensor(b, dtype=np.float64)) * 2.0).sum(), a)
            check_grad(lambda t: (Tensor(a, dtype=np.float64) - t).abs().sum(), b + 2.0)
            check_grad(lambda t: (t * Tensor(b, dtype=np.float64)).sum(), a)

    def test_matmul(self):
        for _ in range(10):
            a = RNG.normal(size=(3, 4))
            b = RNG.normal(size=(4, 2))
            check_grad(lambda t: (ad.matmul(t, Tensor(b, dtype=np.float64))).sum(), a)
            check_grad(lambda t: (ad.matmul(Tensor(a, dtype=np.float64), t)).sum(), b)

    def test_unary_ops(self):
        for _ in range(10):
            x = RNG.normal(size=(2, 5))
            x[np.abs(x) < 0.05] = 0.1  # keep leaky_relu/abs away from the kink
            check_grad(lambda t: ad.leaky_relu(t, slope=0.2).sum(), x)
            check_grad(lambda t: ad.sigmoid(t).sum(), x)
            check_grad(lambda t: ad.tanh(t).sum(), x)
            check_grad(lambda t: t.abs().sum(), x)
            check_grad(lambda t: ad.log(t).sum(), np.abs(x) + 0.5)

    def test_clamp01_interior_and_exterior(self):
        x = np.array([0.2, 0.8, -0.4, 1.7, 0.5])
        check_grad(lambda t: (ad.clamp01(t) * Tensor([1.0, 2.0, 3.0, 4.0, 5.0], dtype=np.float64)).sum(), x)

    def test_reductions(self):
        for _ in range(10):
            x = RNG.normal(size=(2, 3, 4))
            check_grad(lambda t: t.sum(), x)
            check_grad(lambda t: t.mean(), x)
            check_grad(lambda t: (t.mean(axis=(1, 2)) * Tensor([1.0, -2.0], dtype=np.float64)).sum(), x)
            check_grad(lambda t: (t.sum(axis=1)).abs().sum(), x)

    def test_pad(self):
        for _ in range(10):
            x = RNG.normal(size=(1, 2, 3, 3))
            weights = RNG.normal(size=(1, 2, 7, 7))
            check_grad(lambda t: (ad.pad(t, 2) * Tensor(weights, dtype=np.float64)).sum(), x)

    def test_conv2d_strided_padded(self):
        for _ in range(10):
            x = RNG.normal(size=(1, 2, 5, 5))
            w = RNG.normal(size=(2, 2, 3, 3))

            def build_x(t):
                return ad.conv2d(t, Tensor(w, dtype=np.float64), stride=2, padding=1).sum()

            def build_w(t):
                return ad.conv2d(Tensor(x, dtype=np.float64), t, stride=2, padding=1).sum()

            check_grad(build_x, x)
            check_grad(build_w, w)

    def test_conv2d_batched_multichannel(self):
        x = RNG.normal(size=(2, 2, 6, 6))
        w = RNG.normal(size=(3, 2, 3, 3))
        check_grad(lambda t: ad.conv2d(t, Tensor(w, dtype=np.float64), stride=2, padding=1).sum(), x)
        check_grad(lambda t: ad.conv2d(Tensor(x, dtype=np.float64), t, stride=2, padding=1).sum(), w)

    def test_sigmoid_gradient_at_zero_is_quarter(self):
        t = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
        (g,) = ad.gradients(ad.sigmoid(t).sum(), [t])
        assert g[0] == pytest.approx(0.25)

    def test_sum_gradient_is_ones(self):
        t = Tensor(RNG.normal(size=(4, 5)), requires_grad=True, dtype=np.float64)
        (g,) = ad.gradients(t.sum(), [t])
        np.testing.assert_array_equal(g, np.ones((4, 5)))

    def test_two_layer_conv_net_all_parameters(self):
        x = RNG.normal(size=(1, 1, 6, 6))
        w1 = Tensor(RNG.normal(size=(2, 1, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
        w2 = Tensor(RNG.normal(size=(1, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)

        def forward(w1_, w2_):
            h = ad.leaky_relu(ad.conv2d(Tensor(x, dtype=np.float64), w1_, padding=1), 0.2)
            return ad.sigmoid(ad.conv2d(h, w2_, padding=1).mean()).sum()

        loss = forward(w1, w2)
        g1, g2 = ad.gradients(loss, [w1, w2])
        fd1 = finite_diff(lambda v: forward(Tensor(v, dtype=np.float64), w2).item(), w1.data, h=1e-3)
        fd2 = finite_diff(lambda v: forward(w1, Tensor(v, dtype=np.float64)).item(), w2.data, h=1e-3)
        np.testing.assert_allclose(g1, fd1, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(g2, fd2, rtol=1e-4, atol=1e-8)


class TestGraphSemantics:
    def test_unreachable_parameter_gets_zero_gradient(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        loss = a.sum()
        grads = ad.gradients(loss, [a, b])
        np.testing.assert_array_equal(grads[1], np.zeros(3))

    def test_backward_is_linear_in_the_loss(self):
        x = Tensor(RNG.normal(size=(3, 3)), requires_grad=True, dtype=np.float64)

        def grads_of(scale_a, scale_b):
            l1 = ad.sigmoid(x).sum()
            l2 = (x * x).mean()
            loss = scale_a * l1 + scale_b * l2
            (g,) = ad.gradients(loss, [x])
            return g

        g_combined = grads_of(2.0, -3.0)
        g1 = grads_of(1.0, 0.0)
        g2 = grads_of(0.0, 1.0)
        np.testing.assert_allclose(g_combined, 2.0 * g1 - 3.0 * g2, atol=1e-10)

    def test_identical_seeds_are_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
            w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32), requires_grad=True)
            loss = ad.tanh(ad.conv2d(x, w, padding=1)).mean()
            (g,) = ad.gradients(loss, [w])
            return loss.data.tobytes(), g.tobytes()

        assert run() == run()

    def test_detach_cuts_the_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        detached = (x * 2.0).detach()
        assert not detached.requires_grad
        loss = (detached * 3.0).sum()
        grads = ad.gradients(loss, [x])
        np.testing.assert_array_equal(grads[0], np.zeros(3))


class TestOptimizers:
    def test_sgd_contract_example(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = ad.SGD([p], learning_rate=0.1)
        opt.step([np.ones(1, dtype=np.float32)])
        assert p.data[0] == pytest.approx(-0.1)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        for make in (lambda ps: ad.SGD(ps, 0.1), lambda ps: ad.Adam(ps, 0.1)):
            p = Tensor(np.full(4, 0.5), requires_grad=True)
            before = p.data.copy()
            make([p]).step([np.zeros(4, dtype=np.float32)])
            np.testing.assert_array_equal(p.data, before)

    def test_adam_first_step_magnitude_is_learning_rate(self):
        for g0 in (3.0, -0.2, 125.0):
            p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
            opt = ad.Adam([p], learning_rate=2e-4)
            opt.step([np.array([g0])])
            assert abs(p.data[0]) == pytest.approx(2e-4, rel=1e-6)
            assert np.sign(p.data[0]) == -np.sign(g0)

    def test_adam_step_counts_and_moment_shapes(self):
        p = Tensor(np.zeros((2, 3)), requires_grad=True)
        opt = ad.Adam([p])
        opt.step([np.ones((2, 3), dtype=np.float32)])
        opt.step([np.ones((2, 3), dtype=np.float32)])
        assert opt.step_count == 2
        assert opt.m[0].shape == (2, 3) and opt.v[0].shape == (2, 3)

    def test_non_finite_gradient_raises(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = ad.SGD([p], 0.1)
        with pytest.raises(TrainingDivergenceError):
            opt.step([np.array([np.nan, 0.0], dtype=np.float32)])

    def test_learning_rate_contract(self):
        with pytest.raises(ContractError):
            ad.SGD([], learning_rate=0.0)
        with pytest.raises(ContractError):
            ad.Adam([], beta1=1.0)
