import numpy as np
import pytest

from src.models import AdamConfig
from src.tensor_ops import (
    Parameter,
    adam_step,
    concat_channels,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    grad_check,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    sigmoid,
    split_channels,
    strided_conv2x2,
    upscale2x,
)
from src.trainer import dice_loss


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        out = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_all_ones_hand_values(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_shape(self, rng):
        out = conv2d(rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((5, 3, 3, 3)), np.zeros(5))
        assert out.shape == (2, 5, 8, 8)

    def test_cross_correlation_no_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        w = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        # an impulse through cross-correlation yields the kernel rotated by 180 degrees
        np.testing.assert_array_equal(conv2d(x, w)[0, 0], w[0, 0, ::-1, ::-1])

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))

    def test_even_kernel(self, rng):
        with pytest.raises(ValueError, match="odd"):
            conv2d(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 2, 2)))

    def test_linearity(self, rng):
        w = rng.standard_normal((3, 2, 3, 3))
        x, y = rng.standard_normal((2, 1, 2, 6, 6))
        lhs = conv2d(2.5 * x - 0.75 * y, w)
        rhs = 2.5 * conv2d(x, w) - 0.75 * conv2d(y, w)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_backward_bias_is_sum(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        dout = rng.standard_normal((2, 3, 4, 4))
        _, dw, db = conv2d_backward(dout, x, rng.standard_normal((3, 2, 3, 3)))
        assert dw.shape == (3, 2, 3, 3)
        np.testing.assert_allclose(db, dout.sum(axis=(0, 2, 3)))


class TestMaxPool:
    def test_window_max(self):
        out, _ = maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out[0, 0, 0, 0] == 4.0

    def test_backward_routes_to_argmax(self):
        _, argmax = maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        grad = maxpool2x2_backward(np.ones((1, 1, 1, 1)), argmax)
        np.testing.assert_array_equal(grad[0, 0], [[0, 0], [0, 1]])

    def test_ties_go_to_first_element(self):
        _, argmax = maxpool2x2(np.full((1, 1, 2, 2), 7.0))
        grad = maxpool2x2_backward(np.ones((1, 1, 1, 1)), argmax)
        np.testing.assert_array_equal(grad[0, 0], [[1, 0], [0, 0]])

    def test_odd_dims(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2x2(np.zeros((1, 1, 3, 4)))

    def test_inverts_upscale(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_array_equal(maxpool2x2(upscale2x(x))[0], x)


class TestConvTranspose:
    def test_shape_doubles(self, rng):
        assert conv_transpose2d(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 2, 2))).shape == (1, 1, 8, 8)

    def test_single_pixel_scatter(self):
        out = conv_transpose2d(np.ones((1, 1, 1, 1)), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(out, np.ones((1, 1, 2, 2)))

    def test_adjoint_of_strided_conv(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((3, 4, 2, 2))
        y = rng.standard_normal((2, 4, 10, 12))
        lhs = np.vdot(conv_transpose2d(x, w), y)
        rhs = np.vdot(x, strided_conv2x2(y, w))
        assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_kernel_shape_checked(self, rng):
        with pytest.raises(ValueError):
            conv_transpose2d(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3)))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_sigmoid_center(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_stable(self):
        with np.errstate(over="raise"):
            out = sigmoid(np.array([50.0, -50.0, 800.0, -800.0]))
        assert abs(out[0] - 1.0) < 1e-15
        assert abs(out[1]) < 1e-15
        assert 0.0 < out[3] < out[2] < 1.0

    def test_sigmoid_float32_stays_inside_unit_interval(self):
        out = sigmoid(np.array([20.0, 40.0, -120.0], dtype=np.float32))
        assert out.dtype == np.float32
        assert np.all(out > 0) and np.all(out < 1)
        assert out[0] == np.nextafter(np.float32(1), np.float32(0))


class TestConcat:
    def test_shape_and_inverse(self, rng):
        a = rng.standard_normal((1, 2, 4, 4))
        b = rng.standard_normal((1, 3, 4, 4))
        c = concat_channels(a, b)
        assert c.shape == (1, 5, 4, 4)
        a2, b2 = split_channels(c, 2)
        assert np.array_equal(a2, a) and np.array_equal(b2, b)

    def test_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            concat_channels(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 2, 5, 4)))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = Parameter("w", np.array([1.0, -2.0, 3.0]))
        adam_step(p, AdamConfig(lr=1e-3))
        np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])
        assert p.step_count == 1

    def test_first_step_closed_form(self):
        cfg = AdamConfig(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
        g = np.array([0.5, -2.0, 1e-3])
        start = np.array([0.1, 0.2, 0.3])
        p = Parameter("w", start.copy())
        p.grad[:] = g
        adam_step(p, cfg)
        expected = start - cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(p.value, expected, rtol=0, atol=1e-10)

    def test_zero_learning_rate(self, rng):
        p = Parameter("w", rng.standard_normal(10))
        before = p.value.copy()
        for _ in range(3):
            p.grad[:] = rng.standard_normal(10)
            adam_step(p, AdamConfig(lr=0.0))
        np.testing.assert_array_equal(p.value, before)

    def test_identical_streams(self, rng):
        a = Parameter("a", np.ones(4))
        b = Parameter("b", np.ones(4))
        for _ in range(5):
            g = rng.standard_normal(4)
            a.grad[:] = g
            b.grad[:] = g
            adam_step(a, AdamConfig())
            adam_step(b, AdamConfig())
        np.testing.assert_array_equal(a.value, b.value)

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter("enc0.conv1.weight", np.zeros(2))
        p.grad[0] = np.inf
        with pytest.raises(ValueError, match="enc0.conv1.weight"):
            adam_step(p, AdamConfig())


class TestGradCheck:
    def test_linear_sum(self, rng):
        x = rng.random((1, 1, 4, 4)) * 1e-3
        report = grad_check(lambda t: (float(t.sum()), np.ones_like(t)), x)
        assert report.max_rel_error < 1e-10
        assert report.checked == 16

    def test_conv2d_input(self, rng):
        w = rng.standard_normal((3, 2, 3, 3))
        r = rng.standard_normal((1, 3, 6, 6))

        def loss(t):
            return float(np.sum(r * conv2d(t, w))), conv2d_backward(r, t, w)[0]

        assert grad_check(loss, rng.standard_normal((1, 2, 6, 6)), eps=1e-3).max_rel_error < 1e-6

    def test_dice_loss(self, rng):
        target = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
        pred = rng.uniform(0.05, 0.95, size=target.shape)
        assert grad_check(lambda p: dice_loss(p, target), pred).max_rel_error < 1e-6

    def test_relu_kink_is_skipped(self):
        x = np.array([[[[-1.0, 0.0, 2.0]]]])
        report = grad_check(lambda t: (float(relu(t).sum()), (t > 0).astype(float)), x)
        assert report.skipped == [1]
        assert report.checked == 2
        assert report.max_rel_error < 1e-9

    def test_wrong_gradient_is_caught(self, rng):
        report = grad_check(lambda t: (float((t ** 2).sum()), t), rng.standard_normal((1, 1, 2, 2)))
        assert report.max_rel_error > 0.4

    def test_roundoff_floor_absorbs_step_noise(self):
        # the step changes f by about one ulp of 1e3
        x = np.array([[[[1e-4, -2e-4]]]])

        def loss(t):
            return 1e3 + 1e-8 * float(t.sum()), np.full_like(t, 1e-8)

        assert grad_check(loss, x, eps=1e-5, roundoff=1e-9).max_rel_error < 1e-3

    def test_roundoff_floor_keeps_real_errors(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        report = grad_check(lambda t: (float((t ** 2).sum()), 2.02 * t), x, eps=1e-5, roundoff=1e-9)
        assert report.max_rel_error > 5e-3

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda t: (float(t.sum()), np.ones_like(t)), np.zeros((1, 1, 2, 2), dtype=np.float32))
