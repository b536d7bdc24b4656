import numpy as np
import pytest

from headseg import nn
from headseg.errors import OptimizerError, ShapeError


class TestConv2D:
    def test_identity_kernel(self):
        conv = nn.Conv2D(1, 1, 3)
        conv.W[:] = 0
        conv.W[0, 0, 1, 1] = 1.0
        conv.b[:] = 0
        x = np.random.default_rng(0).standard_normal((1, 6, 6)).astype(np.float32)
        assert np.allclose(conv.forward(x), x, atol=1e-7)

    def test_single_pixel_sees_center_weight(self):
        # oracle: direct dot product; same padding leaves only the center tap
        conv = nn.Conv2D(1, 1, 3, np.random.default_rng(1))
        conv.b[:] = 0.25
        x = np.array([[[3.0]]], dtype=np.float32)
        y = conv.forward(x)
        assert y[0, 0, 0] == pytest.approx(conv.W[0, 0, 1, 1] * 3.0 + 0.25, rel=1e-6)

    def test_shape_mismatch_reports_both_shapes(self):
        conv = nn.Conv2D(2, 3, 3)
        with pytest.raises(ShapeError, match="channels"):
            conv.forward(np.zeros((4, 5, 5), np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        conv = nn.Conv2D(2, 3, 3, rng=np.random.default_rng(3))
        err = nn.finite_difference_check(conv, rng.standard_normal((2, 5, 5)), seed=4)
        assert err < 1e-6


class TestConvTranspose2D:
    def test_ones_upsample(self):
        # oracle: operator definition, each input pixel paints a 2x2 block
        t = nn.ConvTranspose2D(1, 1)
        t.W[:] = 1.0
        t.b[:] = 0.5
        y = t.forward(np.ones((1, 1, 1), np.float32))
        assert y.shape == (1, 2, 2)
        assert np.allclose(y, 1.5)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        t = nn.ConvTranspose2D(2, 3, np.random.default_rng(6))
        t.b[:] = 0
        a = rng.standard_normal((2, 4, 4)).astype(np.float32)
        b = rng.standard_normal((2, 4, 4)).astype(np.float32)
        lhs = t.forward(a + b)
        rhs = t.forward(a) + t.forward(b)
        assert np.allclose(lhs, rhs, atol=1e-5)

    def test_output_doubles_spatial(self):
        t = nn.ConvTranspose2D(3, 2, np.random.default_rng(7))
        y = t.forward(np.zeros((3, 5, 6), np.float32))
        assert y.shape == (2, 10, 12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        t = nn.ConvTranspose2D(2, 2, np.random.default_rng(9))
        err = nn.finite_difference_check(t, rng.standard_normal((2, 3, 3)), seed=10)
        assert err < 1e-6


class TestMaxPool2:
    def test_window_max(self):
        pool = nn.MaxPool2()
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        assert pool.forward(x)[0, 0, 0] == 4.0

    def test_constant_ties_route_to_first(self):
        pool = nn.MaxPool2()
        x = np.ones((1, 4, 4), np.float32)
        pool.forward(x)
        g = pool.backward(np.ones((1, 2, 2), np.float32))
        expected = np.zeros((1, 4, 4), np.float32)
        expected[0, 0::2, 0::2] = 1.0
        assert np.array_equal(g, expected)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            nn.MaxPool2().forward(np.zeros((1, 5, 4), np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.permutation(64).reshape(1, 8, 8).astype(np.float64) * 0.1
        err = nn.finite_difference_check(nn.MaxPool2(), x, seed=12)
        assert err < 1e-6


class TestActivations:
    def test_relu_values(self):
        r = nn.ReLU()
        y = r.forward(np.array([[[-3.0, 3.0]]], dtype=np.float32))
        assert y[0, 0, 0] == 0.0 and y[0, 0, 1] == 3.0

    def test_softmax_uniform_logits(self):
        sm = nn.SoftmaxChannels()
        y = sm.forward(np.zeros((7, 2, 2), np.float32))
        assert np.allclose(y, 1.0 / 7.0, atol=1e-7)

    def test_softmax_sums_and_positivity(self):
        rng = np.random.default_rng(13)
        y = nn.SoftmaxChannels().forward(rng.standard_normal((7, 5, 5)).astype(np.float32))
        assert np.all(y > 0)
        assert np.allclose(y.sum(axis=0), 1.0, atol=1e-6)

    def test_relu_gradient_away_from_zero(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 4, 4))
        x[np.abs(x) < 1e-2] = 0.3  # the kink itself is excluded from checks
        err = nn.finite_difference_check(nn.ReLU(), x, seed=15)
        assert err < 1e-8

    def test_softmax_gradient(self):
        rng = np.random.default_rng(16)
        err = nn.finite_difference_check(
            nn.SoftmaxChannels(), rng.standard_normal((5, 3, 3)), seed=17
        )
        assert err < 1e-6


class TestPointwiseConv3D:
    def test_diagonal_sums_channels(self):
        layer = nn.PointwiseConv3D(21, 7, bias=False)
        W = np.zeros((7, 21), np.float32)
        for k in range(3):
            W[np.arange(7), np.arange(7) + 7 * k] = 1.0
        layer.W = W
        rng = np.random.default_rng(18)
        x = rng.random((21, 2, 3, 2)).astype(np.float32)
        y = layer.forward(x)
        expected = x[:7] + x[7:14] + x[14:]
        assert np.allclose(y, expected, atol=1e-6)

    def test_zero_weights_bias_constant(self):
        layer = nn.PointwiseConv3D(21, 7, bias=True)
        layer.W = np.zeros((7, 21), np.float32)
        layer.b = np.arange(7, dtype=np.float32)
        y = layer.forward(np.random.default_rng(19).random((21, 2, 2, 2)).astype(np.float32))
        for c in range(7):
            assert np.all(y[c] == c)

    def test_locality(self):
        layer = nn.PointwiseConv3D(21, 7, bias=True, rng=np.random.default_rng(20))
        rng = np.random.default_rng(21)
        x = rng.random((21, 3, 3, 3)).astype(np.float32)
        y0 = layer.forward(x).copy()
        x2 = x.copy()
        x2[:, 1, 1, 1] += 0.5
        y1 = layer.forward(x2)
        diff = np.abs(y1 - y0).sum(axis=0)
        assert diff[1, 1, 1] > 0
        diff[1, 1, 1] = 0
        assert np.all(diff == 0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn.PointwiseConv3D(21, 7).forward(np.zeros((20, 2, 2, 2), np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        layer = nn.PointwiseConv3D(6, 3, bias=True, rng=np.random.default_rng(23))
        err = nn.finite_difference_check(layer, rng.standard_normal((6, 2, 2, 2)), seed=24)
        assert err < 1e-6


class TestDiceLoss:
    def test_perfect_overlap(self):
        rng = np.random.default_rng(25)
        truth = np.eye(7, dtype=np.float64)[rng.integers(0, 7, (4, 4))].transpose(2, 0, 1)
        loss, _ = nn.dice_loss(truth, truth)
        assert loss <= 1e-6

    def test_uniform_probs_closed_form(self):
        # oracle: substitute p = 1/7 everywhere and one-hot truth into
        # 1 - (2*sum w p g + eps) / (sum w (p+g) + eps) with uniform weights
        n_vox = 16
        probs = np.full((7, 4, 4), 1.0 / 7.0)
        truth = np.zeros((7, 4, 4))
        truth[2] = 1.0
        eps = 1e-6
        expected = 1.0 - (2.0 * (n_vox / 7.0) + eps) / (2.0 * n_vox + eps)
        loss, _ = nn.dice_loss(probs, truth, eps=eps)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(26)
        probs = rng.dirichlet(np.ones(7), size=(4, 4)).transpose(2, 0, 1)
        truth = np.eye(7)[rng.integers(0, 7, (4, 4))].transpose(2, 0, 1)
        loss, grad = nn.dice_loss(probs, truth)
        err = nn.finite_difference_loss(
            lambda p: nn.dice_loss(p, truth)[0], probs, grad, step=1e-6
        )
        assert err < 1e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(27)
        probs = rng.dirichlet(np.ones(7), size=(30,)).T
        truth = np.eye(7)[rng.integers(0, 7, 30)].T
        perm = rng.permutation(30)
        a, _ = nn.dice_loss(probs, truth)
        b, _ = nn.dice_loss(probs[:, perm], truth[:, perm])
        assert a == pytest.approx(b, rel=1e-12)

    def test_class_weights(self):
        rng = np.random.default_rng(28)
        probs = rng.dirichlet(np.ones(3), size=(8,)).T
        truth = np.eye(3)[rng.integers(0, 3, 8)].T
        w = np.array([0.2, 1.0, 3.0])
        loss, grad = nn.dice_loss(probs, truth, class_weights=w)
        err = nn.finite_difference_loss(
            lambda p: nn.dice_loss(p, truth, class_weights=w)[0], probs, grad, step=1e-6
        )
        assert err < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.dice_loss(np.zeros((7, 4)), np.zeros((7, 5)))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        adam = nn.Adam(lr=1e-2)
        p = {"w": np.ones(4, np.float32)}
        adam.step(p, {"w": np.zeros(4, np.float32)})
        assert np.array_equal(p["w"], np.ones(4, np.float32))
        assert adam.t == 1

    def test_first_step_is_lr_times_sign(self):
        # oracle: closed-form t=1 Adam algebra, update = -lr * g / (|g| + eps)
        adam = nn.Adam(lr=1e-3)
        g = np.array([0.5, -2.0, 3.0])
        p = {"w": np.zeros(3)}
        adam.step(p, {"w": g})
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p["w"], expected, rtol=1e-6)

    def test_constant_gradient_monotone_drift(self):
        adam = nn.Adam(lr=1e-3)
        p = {"w": np.zeros(1)}
        g = {"w": np.full(1, 0.7)}
        prev = 0.0
        for _ in range(50):
            adam.step(p, g)
            assert p["w"][0] < prev
            prev = p["w"][0]

    def test_nonfinite_gradient_names_parameter(self):
        adam = nn.Adam()
        with pytest.raises(OptimizerError, match="bad_param"):
            adam.step({"bad_param": np.zeros(2)}, {"bad_param": np.array([1.0, np.nan])})

    def test_bitwise_deterministic(self):
        results = []
        for _ in range(2):
            adam = nn.Adam(lr=1e-2)
            p = {"w": np.linspace(0, 1, 8, dtype=np.float32)}
            for t in range(10):
                adam.step(p, {"w": np.sin(p["w"] + t).astype(np.float32)})
            results.append(p["w"].copy())
        assert np.array_equal(results[0], results[1])


class TestFiniteDifferenceHarness:
    def test_linear_op_near_exact(self):
        # a 1x1 conv is linear; central differences are exact up to rounding
        layer = nn.Conv2D(3, 2, 1, np.random.default_rng(29))
        rng = np.random.default_rng(30)
        err = nn.finite_difference_check(layer, rng.standard_normal((3, 4, 4)), seed=31)
        assert err <= 1e-9

    def test_conv_stack_under_threshold(self):
        rng = np.random.default_rng(32)

        class Stack:
            def __init__(self):
                self.a = nn.Conv2D(1, 2, 3, np.random.default_rng(33))
                self.r = nn.ReLU()
                self.c = nn.Conv2D(2, 2, 3, np.random.default_rng(34))

            def forward(self, x):
                return self.c.forward(self.r.forward(self.a.forward(x)))

            def backward(self, g):
                return self.a.backward(self.r.backward(self.c.backward(g)))

            def params(self):
                return {"aW": self.a.W, "ab": self.a.b, "cW": self.c.W, "cb": self.c.b}

            def grads(self):
                return {"aW": self.a.dW, "ab": self.a.db, "cW": self.c.dW, "cb": self.c.db}

        stack = Stack()
        x = rng.standard_normal((1, 5, 5))
        x[np.abs(x) < 1e-2] = 0.2
        err = nn.finite_difference_check(stack, x, seed=35, skip_params=True)
        assert err < 1e-4
