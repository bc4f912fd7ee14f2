import numpy as np
import pytest

from fcmh import autodiff as ad
from fcmh.autodiff import Tensor, concat, conv2d, deconv2d, grad_check, mse, tensor
from fcmh.errors import ContractError
from fcmh.rng import Xoshiro256


def conv2d_loop_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, the reference for conv2d."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[ni, c, i * stride + ky, j * stride + kx] \
                                    * w[o, c, ky, kx]
                    out[ni, o, i, j] = acc + b[o]
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self):
        rng = Xoshiro256(1)
        x = tensor(rng.normal((2, 3, 5, 5)))
        w = tensor(np.eye(3).reshape(3, 3, 1, 1))
        b = tensor(np.zeros(3))
        out = conv2d(x, w, b, 1, 0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel_zero_output_and_grad(self):
        rng = Xoshiro256(2)
        x = tensor(rng.normal((1, 2, 4, 4)), requires_grad=True)
        w = tensor(np.zeros((3, 2, 3, 3)), requires_grad=True)
        b = tensor(np.zeros(3))
        out = conv2d(x, w, b, 1, 1)
        assert np.all(out.data == 0.0)
        out.sum().backward()
        assert np.all(x.grad == 0.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = Xoshiro256(3 + stride * 10 + pad)
        x = rng.normal((2, 3, 5, 5))
        w = rng.normal((4, 3, 3, 3))
        b = rng.normal(4)
        got = conv2d(tensor(x), tensor(w), tensor(b), stride, pad).data
        want = conv2d_loop_oracle(x, w, b, stride, pad)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_channel_mismatch_raises(self):
        x = tensor(np.zeros((1, 3, 4, 4)))
        w = tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ContractError):
            conv2d(x, w, None, 1, 0)


class TestDeconv2d:
    def test_stride2_ones_kernel_spreads_value(self):
        x = tensor(np.full((1, 1, 1, 1), 3.5))
        w = tensor(np.ones((1, 1, 2, 2)))
        b = tensor(np.zeros(1))
        out = deconv2d(x, w, b, stride=2, padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.5))

    def test_zero_input_gives_bias(self):
        x = tensor(np.zeros((1, 2, 3, 3)))
        w = tensor(np.ones((2, 4, 3, 3)))
        b = tensor(np.arange(4.0))
        out = deconv2d(x, w, b, stride=2, padding=1)
        for c in range(4):
            assert np.all(out.data[:, c] == float(c))

    @pytest.mark.parametrize("stride,pad,k,h",
                             [(1, 0, 3, 8), (2, 1, 3, 9), (2, 0, 2, 8), (2, 2, 5, 9)])
    def test_adjointness(self, stride, pad, k, h):
        rng = Xoshiro256(77 + stride + pad + k)
        x = rng.normal((2, 3, h, h))
        w = rng.normal((4, 3, k, k))
        oh = (h + 2 * pad - k) // stride + 1
        y = rng.normal((2, 4, oh, oh))
        cx = conv2d(tensor(x), tensor(w), None, stride, pad).data
        dy = deconv2d(tensor(y), tensor(w), None, stride, pad).data
        lhs = float(np.sum(cx * y))
        rhs = float(np.sum(x * dy))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestConcat:
    def test_single_tensor_identity(self):
        a = tensor(np.arange(6.0).reshape(2, 3))
        out = concat([a], axis=0)
        np.testing.assert_array_equal(out.data, a.data)

    def test_concat_and_slices_recover(self):
        a = tensor(np.arange(6.0).reshape(2, 3))
        b = tensor(np.arange(10.0).reshape(2, 5))
        out = concat([a, b], axis=1)
        assert out.shape == (2, 8)
        np.testing.assert_array_equal(out.slice_axis(1, 0, 3).data, a.data)
        np.testing.assert_array_equal(out.slice_axis(1, 3, 8).data, b.data)

    def test_gradient_splits_to_ones(self):
        a = tensor(np.zeros((2, 3)), requires_grad=True)
        b = tensor(np.zeros((2, 5)), requires_grad=True)
        concat([a, b], axis=1).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 5)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractError):
            concat([tensor(np.zeros((2, 3))), tensor(np.zeros((3, 3)))], axis=1)


class TestBackward:
    def test_sum_gives_ones(self):
        x = tensor(np.zeros((3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_constant_loss_gives_zero_grad(self):
        x = tensor(np.ones((2, 2)), requires_grad=True)
        loss = tensor(np.array(5.0), requires_grad=True) * 2.0
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_raises(self):
        x = tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_conv_mse_matches_finite_differences(self):
        rng = Xoshiro256(11)
        x = rng.normal((1, 2, 6, 6))
        target = rng.normal((1, 3, 6, 6))
        w0 = rng.normal((3, 2, 3, 3)) * 0.5
        xt = tensor(x)
        tt = tensor(target)

        def loss_fn(w):
            return mse(conv2d(xt, w, None, 1, 1), tt)

        err = grad_check(loss_fn, tensor(w0, requires_grad=True), h=1e-5)
        assert err < 1e-6

    def test_quadratic_grad_check(self):
        rng = Xoshiro256(12)
        x0 = rng.normal(10)
        err = grad_check(lambda x: (x * x).sum(), tensor(x0, requires_grad=True), h=1e-5)
        assert err < 1e-8


class TestElementwise:
    def test_leaky_relu_slope(self):
        x = tensor(np.array([-2.0, 3.0]), requires_grad=True)
        y = x.leaky_relu(0.2)
        np.testing.assert_allclose(y.data, [-0.4, 3.0])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [0.2, 1.0])

    def test_normal_cdf_values(self):
        x = tensor(np.array([0.0, 0.5, -0.5]))
        got = x.normal_cdf().data
        np.testing.assert_allclose(
            got, [0.5, 0.6914624612740131, 0.3085375387259869], atol=1e-14)

    @pytest.mark.parametrize("name", ["exp", "log", "abs", "sigmoid", "tanh", "softplus",
                                      "normal_cdf"])
    def test_unary_grads_match_fd(self, name):
        rng = Xoshiro256(13)
        x0 = rng.uniform(8, low=0.2, high=2.0)

        def f(x):
            return getattr(x, name)().sum()

        assert grad_check(f, tensor(x0, requires_grad=True), h=1e-6) < 1e-7

    def test_upsample_nearest_roundtrip_grad(self):
        rng = Xoshiro256(14)
        x = tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        y = x.upsample_nearest(2)
        assert y.shape == (1, 2, 6, 6)
        np.testing.assert_array_equal(y.data[0, 0, :2, :2], np.full((2, 2), x.data[0, 0, 0, 0]))
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))

    def test_channel_affine_grads(self):
        rng = Xoshiro256(15)
        x0 = rng.normal((2, 3, 4))
        w0 = rng.normal((2, 5, 3))
        b0 = rng.normal((2, 5, 1))
        xt, bt = tensor(x0), tensor(b0, requires_grad=True)

        def f(w):
            return ad.channel_affine(xt, w, bt).tanh().sum()

        assert grad_check(f, tensor(w0, requires_grad=True), h=1e-6) < 1e-7


class TestCheckedMode:
    def test_nan_detection(self):
        ad.set_checked(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(ContractError):
                tensor(np.array([-1.0])).log()
        finally:
            ad.set_checked(False)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run():
            rng = Xoshiro256(99)
            x = tensor(rng.normal((2, 3, 8, 8)), requires_grad=True)
            w = tensor(rng.normal((4, 3, 3, 3)), requires_grad=True)
            out = conv2d(x, w, None, 2, 1).leaky_relu(0.2).sum()
            out.backward()
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
