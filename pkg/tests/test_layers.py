import numpy as np
import pytest

from ncmn import autodiff as ad
from ncmn.autodiff import Tensor
from ncmn.errors import ConfigError, ContractError, NumericError, ShapeError
from ncmn.layers import (
    BNLayer,
    BNParams,
    DenseParams,
    affine_activation,
    batchnorm_signal_stats,
    batchnorm_standard,
    dense_preact,
    init_conv,
    init_dense,
    phi,
    psi,
)

from conftest import numeric_grad, rel_err


def bn(channels, eps=1e-5, momentum=0.9):
    return BNParams.create(channels, momentum=momentum, eps=eps)


class TestDense:
    def test_values(self):
        p = DenseParams(Tensor([[2.0], [3.0]]))
        np.testing.assert_array_equal(dense_preact(Tensor([[1.0, 1.0]]), p).data, [[5]])

    def test_zero_weights(self, rng):
        p = DenseParams(Tensor(np.zeros((4, 3))))
        assert not dense_preact(Tensor(rng.standard_normal((5, 4))), p).data.any()

    def test_matches_matmul(self, rng):
        x, w = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        np.testing.assert_array_equal(dense_preact(Tensor(x), DenseParams(Tensor(w))).data,
                                      ad.matmul(Tensor(x), Tensor(w)).data)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            dense_preact(Tensor(np.ones((2, 3))), DenseParams(Tensor(np.ones((4, 1)))))

    def test_init_is_bias_free_and_scaled(self, rng):
        p = init_dense(400, 300, rng)
        assert p.bias is None
        assert abs(p.weight.data.std() / np.sqrt(2 / 400) - 1) < 0.05

    def test_conv_init_shapes(self, rng):
        p = init_conv(3, 8, rng, stride=2)
        assert p.weight.shape == (8, 3, 3, 3) and p.pad == 1 and p.stride == 2 and p.fan_in == 27


class TestBNParams:
    def test_rejects_negative_running_var(self):
        with pytest.raises(ConfigError):
            BNParams(Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.array([1.0, -1.0]))

    def test_rejects_bad_momentum(self):
        with pytest.raises(ConfigError):
            BNParams.create(2, momentum=1.0)

    def test_rejects_negative_eps(self):
        with pytest.raises(ConfigError):
            BNParams.create(2, eps=-1e-5)

    def test_layer_channel_check(self, rng):
        with pytest.raises(ShapeError):
            BNLayer(init_dense(3, 4, rng), bn(5))


class TestBatchnormStandard:
    def test_symmetric_pair(self):
        out = batchnorm_standard(Tensor([[1.0], [3.0]]), bn(1, eps=0.0))
        np.testing.assert_array_equal(out.data.reshape(-1), [-1, 1])

    def test_constant_channel(self):
        out = batchnorm_standard(Tensor([[5.0], [5.0], [5.0]]), bn(1))
        np.testing.assert_array_equal(out.data.reshape(-1), [0, 0, 0])

    def test_random_batch_statistics(self, rng):
        # scale 10 keeps var / (var + eps) above 1 - 1e-6
        z = Tensor(10.0 * rng.standard_normal((64, 8)) + 3.0)
        out = batchnorm_standard(z, bn(8)).data
        assert np.max(np.abs(out.mean(axis=0))) < 1e-10
        var = out.var(axis=0)
        assert np.all(var <= 1.0) and np.all(var >= 1.0 - 1e-6)

    def test_conv_pools_spatial_axes(self, rng):
        z = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
        out = batchnorm_standard(Tensor(z), bn(3, eps=0.0)).data
        ref = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_running_stats_update(self):
        p = bn(1)
        batchnorm_standard(Tensor([[1.0], [3.0]]), p)
        assert p.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
        assert p.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)

    def test_eval_uses_running_stats_without_update(self):
        p = bn(1, eps=0.0)
        p.running_mean[:] = 2.0
        p.running_var[:] = 4.0
        out = batchnorm_standard(Tensor([[4.0], [0.0]]), p, mode="eval")
        np.testing.assert_array_equal(out.data.reshape(-1), [1, -1])
        assert p.running_mean[0] == 2.0 and p.running_var[0] == 4.0

    def test_batch_of_one_in_train(self):
        with pytest.raises(ContractError):
            batchnorm_standard(Tensor([[1.0, 2.0]]), bn(2))

    def test_batch_of_one_in_eval_is_fine(self):
        assert batchnorm_standard(Tensor([[1.0, 2.0]]), bn(2), mode="eval").shape == (1, 2)

    def test_zero_running_var_without_eps(self):
        p = bn(1, eps=0.0)
        p.running_var[:] = 0.0
        with pytest.raises(NumericError):
            batchnorm_standard(Tensor([[1.0]]), p, mode="eval")

    def test_eval_matches_train_after_running_stats_converge(self, rng):
        mu, s, batch = np.array([1.0, -2.0, 0.5, 4.0]), np.array([1.0, 3.0, 0.5, 2.0]), 64
        p = bn(4)
        for _ in range(300):
            batchnorm_standard(Tensor(mu + s * rng.standard_normal((batch, 4))), p)
        # stationary EMA of batch means: std = (s / sqrt(B)) * sqrt((1 - m) / (1 + m))
        se = s / np.sqrt(batch) * np.sqrt(0.1 / 1.9)
        assert np.all(np.abs(p.running_mean - mu) < 3 * se)
        big = Tensor(mu + s * rng.standard_normal((20000, 4)))
        train_out = batchnorm_standard(big, p, update_stats=False).data
        eval_out = batchnorm_standard(big, p, mode="eval").data
        # shift of the eval output is the running-mean error in units of s, plus sampling error of the big batch
        shift = np.abs(eval_out.mean(axis=0) - train_out.mean(axis=0))
        assert np.all(shift < 3 * (se / s + 1 / np.sqrt(20000)) + 1e-3)


class TestSignalStats:
    def test_same_tensor_equals_standard(self, rng):
        zv = rng.standard_normal((16, 5))
        p1, p2 = bn(5), bn(5)
        a = batchnorm_signal_stats(Tensor(zv), Tensor(zv), p1).data
        z = Tensor(zv)
        b = batchnorm_standard(z, p2).data
        np.testing.assert_array_equal(a, b)
        c = batchnorm_signal_stats(z, z, bn(5)).data
        np.testing.assert_array_equal(c, b)

    def test_hand_values(self):
        zs = Tensor([[0.0], [2.0]])
        out1 = batchnorm_signal_stats(Tensor([[1.0], [1.0]]), zs, bn(1, eps=0.0))
        np.testing.assert_array_equal(out1.data.reshape(-1), [0, 0])
        out2 = batchnorm_signal_stats(Tensor([[2.0], [0.0]]), zs, bn(1, eps=0.0))
        np.testing.assert_array_equal(out2.data.reshape(-1), [1, -1])

    def test_running_stats_track_noisy_tensor(self):
        p = bn(1)
        batchnorm_signal_stats(Tensor([[4.0], [0.0]]), Tensor([[0.0], [2.0]]), p)
        assert p.running_mean[0] == pytest.approx(0.1 * 2.0)
        assert p.running_var[0] == pytest.approx(0.9 + 0.1 * 4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm_signal_stats(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))), bn(1))


class TestAffineActivation:
    def test_identity(self, rng):
        z = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(affine_activation(Tensor(z), bn(2), "identity").data, z)

    def test_scale_shift_relu(self):
        p = bn(1)
        p.gamma.data[:] = 2.0
        p.beta.data[:] = 1.0
        out = affine_activation(Tensor([[-1.0], [1.0]]), p, "relu")
        np.testing.assert_array_equal(out.data.reshape(-1), [0, 3])

    def test_gamma_gradient(self):
        p = bn(1)
        ad.backward(ad.reduce_sum(affine_activation(Tensor([[3.0]]), p, "identity")))
        assert p.gamma.grad[0] == 3.0

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            affine_activation(Tensor([[1.0]]), bn(1), "tanh")


def test_batch_second_moment_is_constant_per_sample(rng):
    z = Tensor(rng.uniform(-2, 2, (16, 4)), requires_grad=True)
    s = ad.reduce_mean(ad.square(batchnorm_standard(z, bn(4, eps=0.0))), 0)
    loss = ad.reduce_sum(s)
    ad.backward(loss)
    assert np.max(np.abs(z.grad)) < 1e-8

    def f():
        return float(np.sum(batchnorm_standard(Tensor(z.data), bn(4, eps=0.0), update_stats=False).data ** 2) / 16)

    step = 1e-5
    flat = z.data.reshape(-1)
    for i in (0, 5, 37):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig
        assert abs(up - f()) < 1e2 * step**2


def test_psi_phi_composite_gradients(rng):
    layer = BNLayer(init_dense(5, 4, rng))
    x = Tensor(rng.uniform(-2, 2, (8, 5)), requires_grad=True)
    c = rng.standard_normal((8, 4))

    def loss():
        return ad.reduce_sum(ad.mul(phi(x, layer, update_stats=False), c))

    ad.backward(loss())
    grads = [t.grad.copy() for t in (x, layer.params.weight, layer.bn.gamma, layer.bn.beta)]
    for t, g in zip((x, layer.params.weight, layer.bn.gamma, layer.bn.beta), grads):
        assert rel_err(g, numeric_grad(lambda: loss().item(), t.data)) < 1e-4


def test_psi_conv(rng):
    layer = BNLayer(init_conv(2, 3, rng))
    out = psi(Tensor(rng.standard_normal((4, 2, 6, 6))), layer)
    assert out.shape == (4, 3, 6, 6)
    assert np.max(np.abs(out.data.mean(axis=(0, 2, 3)))) < 1e-12
