import math

import numpy as np
import pytest

from ncmn import autodiff as ad
from ncmn.autodiff import Tensor
from ncmn.errors import ConfigError, ContractError, ShapeError
from ncmn.layers import BNLayer, DenseParams, batchnorm_standard, init_conv, init_dense, phi, preact, psi
from ncmn.noise import (
    NoiseSpec,
    ShakeConfig,
    apply_mn,
    apply_weight_noise,
    make_rng,
    mix_branches,
    ncmn0_layer,
    ncmn1_layer,
    ncmn2_block,
    sample_mask,
    shake_alphas,
    shake_block,
)


def dense_layer(rng, fan_in=5, fan_out=4):
    return BNLayer(init_dense(fan_in, fan_out, rng))


def grads(tensors):
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def reset(tensors):
    for t in tensors:
        t.grad = None


class TestNoiseSpec:
    def test_negative_sigma(self):
        with pytest.raises(ConfigError, match="sigma >= 0"):
            NoiseSpec(sigma=-0.1)

    def test_zero_keep_prob(self):
        with pytest.raises(ConfigError):
            NoiseSpec(kind="bernoulli_dropout", keep_prob=0.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            NoiseSpec(kind="laplace")

    def test_variances(self):
        assert NoiseSpec(sigma=0.35).variance == pytest.approx(0.1225)
        assert NoiseSpec(kind="bernoulli_dropout", keep_prob=0.8).variance == pytest.approx(0.25)


class TestSampleMask:
    def test_zero_sigma_is_ones(self):
        u = sample_mask(NoiseSpec(sigma=0.0), (3, 4), make_rng(0))
        np.testing.assert_array_equal(u.data, np.ones((3, 4)))

    def test_dropout_values(self):
        u = sample_mask(NoiseSpec(kind="bernoulli_dropout", keep_prob=0.5), (1000,), make_rng(1))
        assert set(np.unique(u.data)) == {0.0, 2.0}

    def test_uniform_support_and_mean(self):
        u = sample_mask(NoiseSpec(sigma=0.35), (10**6,), make_rng(2)).data
        lo, hi = 1 - 0.35 * math.sqrt(3), 1 + 0.35 * math.sqrt(3)
        assert lo == pytest.approx(0.39378, abs=1e-5) and hi == pytest.approx(1.60622, abs=1e-5)
        assert u.min() >= lo and u.max() <= hi
        assert abs(u.mean() - 1) < 3 * 0.35 / 1e3

    def test_spatial_sharing(self):
        u = sample_mask(NoiseSpec(sigma=0.3), (2, 3, 5, 5), make_rng(3))
        assert u.shape == (2, 3, 1, 1)
        u = sample_mask(NoiseSpec(sigma=0.3, share_spatial=False), (2, 3, 5, 5), make_rng(3))
        assert u.shape == (2, 3, 5, 5)

    def test_mask_is_not_differentiable(self):
        assert not sample_mask(NoiseSpec(), (2, 2), make_rng(0)).requires_grad

    @pytest.mark.parametrize("spec", [
        NoiseSpec("uniform", sigma=0.35),
        NoiseSpec("gaussian", sigma=0.25),
        NoiseSpec("bernoulli_dropout", keep_prob=0.7),
    ])
    def test_moments(self, spec):
        u = sample_mask(spec, (10**6,), make_rng(4)).data
        assert abs(u.mean() - 1) < 3 * u.std() / 1e3
        assert abs(u.var() / spec.variance - 1) < 0.02


class TestApplyMN:
    def test_zero_sigma(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(apply_mn(Tensor(x), NoiseSpec(sigma=0.0), make_rng(0)).data, x)

    def test_fixed_mask(self):
        out = apply_mn(Tensor([2.0]), NoiseSpec(), mask=Tensor([1.5]))
        np.testing.assert_array_equal(out.data, [3.0])

    def test_eval_is_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        assert apply_mn(x, NoiseSpec(), make_rng(0), mode="eval") is x

    def test_unbiased_over_resamplings(self):
        # every row draws its own mask, so rows are independent resamplings
        samples = apply_mn(Tensor(np.ones((10**5, 6))), NoiseSpec(sigma=0.35), make_rng(5)).data
        se = 0.35 / math.sqrt(10**5)
        assert np.all(np.abs(samples.mean(axis=0) - 1) < 3 * se)


class TestWeightNoise:
    def test_zero_sigma(self, rng):
        p = init_dense(3, 2, rng)
        q = apply_weight_noise(p, NoiseSpec(sigma=0.0), make_rng(0))
        np.testing.assert_array_equal(q.weight.data, p.weight.data)

    def test_dropout_single_weight(self):
        p = DenseParams(Tensor([[2.0]], requires_grad=True))
        seen = {float(apply_weight_noise(p, NoiseSpec("bernoulli_dropout", keep_prob=0.5), r).weight.data[0, 0])
                for r in (make_rng(s) for s in range(20))}
        assert seen == {0.0, 4.0}

    def test_independent_entry_per_weight(self, rng):
        p = init_dense(6, 5, rng)
        q = apply_weight_noise(p, NoiseSpec(sigma=0.3), make_rng(1))
        ratio = q.weight.data / p.weight.data
        assert len(np.unique(np.round(ratio, 12))) == 30

    def test_gradient_reaches_original_weight(self, rng):
        p = init_dense(3, 2, rng)
        mask = Tensor(rng.uniform(0.5, 1.5, (3, 2)))
        x = rng.standard_normal((4, 3))
        ad.backward(ad.reduce_sum(preact(Tensor(x), apply_weight_noise(p, NoiseSpec(), mask=mask))))
        np.testing.assert_allclose(p.weight.grad, x.sum(axis=0)[:, None] * mask.data, rtol=1e-14)

    def test_unit_covariance_differs_from_activation_noise(self):
        # two units over a correlated input pair; given x the single-unit variances
        # coincide, the cross-unit covariance is sigma^2 sum_i w_i1 w_i2 x_i^2 for
        # activation noise and zero for weight noise
        rng = make_rng(6)
        sigma, n = 0.35, 400_000
        w = np.array([[1.0, 0.5], [0.8, 1.0]])
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        x = rng.multivariate_normal([0.3, -0.2], cov, n)
        spec = NoiseSpec(sigma=sigma, share_spatial=False)
        u_act = sample_mask(spec, (n, 2), rng).data
        u_w = sample_mask(spec, (n, 2, 2), rng).data
        z_act = np.einsum("ni,ij->nj", u_act * x, w)
        z_w = np.einsum("ni,nij->nj", x, u_w * w)
        ex2 = np.mean(x**2, axis=0)
        var_unit = np.var(x @ w, axis=0) + sigma**2 * (ex2 @ w**2)
        cov_act = np.cov((x @ w).T)[0, 1] + sigma**2 * np.sum(w[:, 0] * w[:, 1] * ex2)
        cov_w = np.cov((x @ w).T)[0, 1]
        assert np.all(np.abs(np.var(z_act, axis=0) / var_unit - 1) < 0.02)
        assert np.all(np.abs(np.var(z_w, axis=0) / var_unit - 1) < 0.02)
        assert abs(np.cov(z_act.T)[0, 1] - cov_act) < 0.02 * abs(cov_act)
        assert abs(np.cov(z_w.T)[0, 1] - cov_w) < 0.02 * abs(cov_w)
        assert abs(cov_act - cov_w) > 0.1


class TestNCMN1:
    def setup(self, rng):
        layer = dense_layer(rng)
        x = Tensor(rng.uniform(-2, 2, (8, 5)), requires_grad=True)
        mask = Tensor(rng.uniform(0.4, 1.6, (8, 5)))
        c = rng.standard_normal((8, 4))
        return layer, x, mask, c

    def test_zero_sigma_matches_standard(self, rng):
        layer, x, _, c = self.setup(rng)
        tensors = [x] + layer.parameters()
        out = ncmn1_layer(x, layer, NoiseSpec(sigma=0.0), make_rng(0))
        ad.backward(ad.reduce_sum(ad.mul(out, c)))
        g1 = grads(tensors)
        reset(tensors)
        ref = psi(x, layer, update_stats=False)
        ad.backward(ad.reduce_sum(ad.mul(ref, c)))
        np.testing.assert_array_equal(out.data, ref.data)
        for a, b in zip(g1, grads(tensors)):
            np.testing.assert_array_equal(a, b)

    def test_forward_is_bn_of_noisy_preactivation(self, rng):
        layer, x, mask, _ = self.setup(rng)
        out = ncmn1_layer(x, layer, NoiseSpec(), mask=mask)
        ref = batchnorm_standard(preact(ad.mul(x, mask), layer.params), layer.bn, update_stats=False)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    def test_gradient_is_clean_path_gradient(self, rng):
        layer, x, mask, c = self.setup(rng)
        tensors = [x] + layer.parameters()
        ad.backward(ad.reduce_sum(ad.mul(ncmn1_layer(x, layer, NoiseSpec(), mask=mask), c)))
        g1 = grads(tensors)
        reset(tensors)
        ad.backward(ad.reduce_sum(ad.mul(psi(x, layer, update_stats=False), c)))
        for a, b in zip(g1, grads(tensors)):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_running_stats_from_noisy(self, rng):
        layer, x, mask, _ = self.setup(rng)
        ncmn1_layer(x, layer, NoiseSpec(), mask=mask)
        z = preact(ad.mul(x, mask), layer.params).data
        np.testing.assert_allclose(layer.bn.running_mean, 0.1 * z.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(layer.bn.running_var, 0.9 + 0.1 * z.var(axis=0), rtol=1e-12)

    def test_eval_with_mask(self, rng):
        layer, x, mask, _ = self.setup(rng)
        with pytest.raises(ContractError):
            ncmn1_layer(x, layer, NoiseSpec(), mode="eval", mask=mask)

    def test_eval_is_deterministic(self, rng):
        layer, x, _, _ = self.setup(rng)
        a = ncmn1_layer(x, layer, NoiseSpec(), make_rng(0), mode="eval").data
        b = ncmn1_layer(x, layer, NoiseSpec(), make_rng(1), mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_conv_layer(self, rng):
        layer = BNLayer(init_conv(2, 3, rng))
        x = Tensor(rng.standard_normal((4, 2, 5, 5)))
        mask = sample_mask(NoiseSpec(sigma=0.3), x.shape, rng)
        out = ncmn1_layer(x, layer, NoiseSpec(), mask=mask)
        ref = batchnorm_standard(preact(ad.mul(x, mask), layer.params), layer.bn, update_stats=False)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12


class TestNCMN0:
    def test_zero_sigma(self, rng):
        layer = dense_layer(rng)
        x = Tensor(rng.standard_normal((6, 5)))
        out = ncmn0_layer(x, layer, NoiseSpec(sigma=0.0), make_rng(0))
        np.testing.assert_array_equal(out.data, psi(x, layer, update_stats=False).data)

    def test_unit_noise_doubles_forward_keeps_gradient(self):
        # batch [0, 1] normalizes to [-1, 1]; v = 1 doubles it
        layer = BNLayer(DenseParams(Tensor([[1.0]], requires_grad=True)), None)
        layer.bn.eps = 0.0
        x = Tensor([[0.0], [1.0]])
        out = ncmn0_layer(x, layer, NoiseSpec(), mask=Tensor([[2.0], [2.0]]))
        np.testing.assert_array_equal(out.data.reshape(-1), [-2.0, 2.0])
        zs = Tensor([[0.5]], requires_grad=True)
        y = ad.add(zs, ad.stop_gradient(ad.mul(zs, 1.0)))
        assert y.item() == 1.0
        ad.backward(ad.reduce_sum(y))
        assert zs.grad[0, 0] == 1.0

    def test_gradient_independent_of_mask(self, rng):
        layer = dense_layer(rng)
        x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        c = rng.standard_normal((6, 4))
        tensors = [x] + layer.parameters()
        results = []
        for seed in (1, 2):
            reset(tensors)
            out = ncmn0_layer(x, layer, NoiseSpec(sigma=0.4), make_rng(seed))
            ad.backward(ad.reduce_sum(ad.mul(out, c)))
            results.append(grads(tensors))
        for a, b in zip(*results):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_relative_noise_variance(self, rng):
        layer = dense_layer(rng, 3, 2)
        # tiling a fixed batch leaves its BN statistics unchanged
        x = Tensor(np.tile(rng.standard_normal((4, 3)), (25000, 1)))
        spec = NoiseSpec(sigma=0.35)
        zs = psi(x, layer, update_stats=False).data
        ratios = ncmn0_layer(x, layer, spec, make_rng(7)).data / zs - 1
        assert np.all(np.abs(ratios.var(axis=0) / spec.variance - 1) < 0.02)


class TestNCMN2:
    def setup(self, rng):
        l1, l2 = dense_layer(rng, 5, 6), dense_layer(rng, 6, 4)
        x = Tensor(rng.uniform(-2, 2, (8, 5)), requires_grad=True)
        masks = (Tensor(rng.uniform(0.4, 1.6, (8, 5))), Tensor(rng.uniform(0.4, 1.6, (8, 6))))
        c = rng.standard_normal((8, 4))
        return l1, l2, x, masks, c

    def clean(self, x, l1, l2):
        return psi(phi(x, l1, update_stats=False), l2, update_stats=False)

    def test_zero_sigma(self, rng):
        l1, l2, x, _, c = self.setup(rng)
        tensors = [x] + l1.parameters() + l2.parameters()
        out = ncmn2_block(x, l1, l2, NoiseSpec(sigma=0.0), make_rng(0))
        ad.backward(ad.reduce_sum(ad.mul(out, c)))
        g1 = grads(tensors)
        reset(tensors)
        ref = self.clean(x, l1, l2)
        ad.backward(ad.reduce_sum(ad.mul(ref, c)))
        np.testing.assert_array_equal(out.data, ref.data)
        for a, b in zip(g1, grads(tensors)):
            np.testing.assert_array_equal(a, b)

    def test_forward_is_noisy_composite(self, rng):
        l1, l2, x, (u1, u2), _ = self.setup(rng)
        out = ncmn2_block(x, l1, l2, NoiseSpec(), masks=(u1, u2))
        h = phi(ad.mul(x, u1), l1, update_stats=False)
        ref = psi(ad.mul(h, u2), l2, update_stats=False)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    def test_gradient_is_clean_path_gradient(self, rng):
        l1, l2, x, masks, c = self.setup(rng)
        tensors = [x] + l1.parameters() + l2.parameters()
        ad.backward(ad.reduce_sum(ad.mul(ncmn2_block(x, l1, l2, NoiseSpec(), masks=masks), c)))
        g1 = grads(tensors)
        reset(tensors)
        ad.backward(ad.reduce_sum(ad.mul(self.clean(x, l1, l2), c)))
        for a, b in zip(g1, grads(tensors)):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_shared_parameters_rejected(self, rng):
        l1 = dense_layer(rng, 4, 4)
        l2 = BNLayer(l1.params)
        with pytest.raises(ConfigError):
            ncmn2_block(Tensor(np.ones((2, 4))), l1, l2, NoiseSpec(), make_rng(0))

    def test_eval_is_clean(self, rng):
        l1, l2, x, _, _ = self.setup(rng)
        out = ncmn2_block(x, l1, l2, NoiseSpec(), make_rng(0), mode="eval")
        ref = psi(phi(x, l1, "eval"), l2, "eval")
        np.testing.assert_array_equal(out.data, ref.data)


class TestShake:
    def setup(self, rng):
        b1 = (dense_layer(rng, 5, 6), dense_layer(rng, 6, 4))
        b2 = (dense_layer(rng, 5, 6), dense_layer(rng, 6, 4))
        x = Tensor(rng.uniform(-2, 2, (8, 5)), requires_grad=True)
        return b1, b2, x

    def branch(self, x, b):
        return psi(phi(x, b[0], update_stats=False), b[1], update_stats=False)

    def test_half_is_plain_average(self, rng):
        b1, b2, x = self.setup(rng)
        half = np.full((8, 1), 0.5)
        out = shake_block(x, b1, b2, ShakeConfig("even"), alphas=(half, half))
        ref = 0.5 * (self.branch(x, b1).data + self.branch(x, b2).data)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_alpha_one_is_branch_one(self, rng):
        b1, b2, x = self.setup(rng)
        out = shake_block(x, b1, b2, ShakeConfig("even"), alphas=(np.ones((8, 1)), np.full((8, 1), 0.5)))
        assert np.max(np.abs(out.data - self.branch(x, b1).data)) < 1e-12

    def test_even_mode_gradient_is_half_each(self, rng):
        b1, b2, x = self.setup(rng)
        tensors = [x] + [t for l in b1 + b2 for t in l.parameters()]
        c = rng.standard_normal((8, 4))
        out = shake_block(x, b1, b2, ShakeConfig("even"), make_rng(3))
        ad.backward(ad.reduce_sum(ad.mul(out, c)))
        g1 = grads(tensors)
        reset(tensors)
        ref = mix_branches(self.branch(x, b1), self.branch(x, b2), 0.5)
        ad.backward(ad.reduce_sum(ad.mul(ref, c)))
        for a, b in zip(g1, grads(tensors)):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_even_mode_branch_outputs_receive_half_upstream(self):
        z1 = Tensor([[1.0, -2.0]], requires_grad=True)
        z2 = Tensor([[0.5, 3.0]], requires_grad=True)
        for alpha in (0.0, 0.13, 0.9):
            z1.grad = z2.grad = None
            a, a_bw = np.array([[alpha]]), np.array([[0.5]])
            out = ad.add(mix_branches(z1, z2, a_bw), ad.stop_gradient(ad.mul(ad.sub(z1, z2), a - a_bw)))
            np.testing.assert_allclose(out.data, alpha * z1.data + (1 - alpha) * z2.data, rtol=0, atol=1e-15)
            ad.backward(ad.reduce_sum(out))
            np.testing.assert_array_equal(z1.grad, [[0.5, 0.5]])
            np.testing.assert_array_equal(z2.grad, [[0.5, 0.5]])

    def test_alpha_sampling(self):
        a, a_bw = shake_alphas(ShakeConfig("shake"), 4, 4, make_rng(0))
        assert a.shape == (4, 1, 1, 1) and np.all((a >= 0) & (a <= 1))
        assert not np.array_equal(a, a_bw)
        a, a_bw = shake_alphas(ShakeConfig("even", per_sample=False), 4, 2, make_rng(0))
        assert a.shape == (1, 1) and a_bw[0, 0] == 0.5

    def test_branch_shape_mismatch(self, rng):
        b1 = (dense_layer(rng, 5, 6), dense_layer(rng, 6, 4))
        b2 = (dense_layer(rng, 5, 6), dense_layer(rng, 6, 3))
        with pytest.raises(ShapeError):
            shake_block(Tensor(np.ones((4, 5))), b1, b2, ShakeConfig(), make_rng(0))

    def test_eval_uses_half(self, rng):
        b1, b2, x = self.setup(rng)
        out = shake_block(x, b1, b2, ShakeConfig(), make_rng(0), mode="eval")
        ref = 0.5 * (psi(phi(x, b1[0], "eval"), b1[1], "eval").data + psi(phi(x, b2[0], "eval"), b2[1], "eval").data)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-15)


def test_invalid_mode():
    with pytest.raises(ConfigError):
        apply_mn(Tensor([1.0]), NoiseSpec(), make_rng(0), mode="test")
