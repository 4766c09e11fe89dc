"""A catalogue of small graphs for finite-difference gradient checks.

Each case maps a generator to ``(loss_fn, params)``.  Inputs are drawn from
``U[-2, 2]`` and noise masks are fixed per instantiation, so ``loss_fn`` is
deterministic.  :func:`run_suite` checks every case on several random
instantiations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diagnostics import grad_check
from .layers import (
    BNLayer,
    BNParams,
    affine_activation,
    batchnorm_signal_stats,
    batchnorm_standard,
    init_conv,
    init_dense,
    phi,
    psi,
)
from .noise import (
    NoiseSpec,
    ShakeConfig,
    apply_mn,
    apply_weight_noise,
    ncmn0_layer,
    ncmn1_layer,
    ncmn2_block,
    sample_mask,
    shake_alphas,
    shake_block,
)
from .training import softmax_cross_entropy

__all__ = ["CASES", "SuiteResult", "run_suite"]

SPEC = NoiseSpec(sigma=0.35)


def _leaf(rng, shape):
    return Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


def _binary(op):
    def case(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        c = rng.standard_normal((3, 4))
        return (lambda: ad.reduce_sum(ad.mul(op(a, b), c))), [a, b]
    return case


def _broadcast_mul(rng):
    a, s = _leaf(rng, (2, 3, 2, 2)), _leaf(rng, (1, 3, 1, 1))
    c = rng.standard_normal((2, 3, 2, 2))
    return (lambda: ad.reduce_sum(ad.mul(ad.mul(a, s), c))), [a, s]


def _unary(op, low=-2.0):
    def case(rng):
        x = Tensor(rng.uniform(low, 2.0, (3, 4)), requires_grad=True)
        c = rng.standard_normal((3, 4))
        return (lambda: ad.reduce_sum(ad.mul(op(x), c))), [x]
    return case


def _relu(rng):
    # keep inputs away from the kink
    x = rng.uniform(0.1, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    t = Tensor(x, requires_grad=True)
    c = rng.standard_normal((3, 4))
    return (lambda: ad.reduce_sum(ad.mul(ad.relu(t), c))), [t]


def _matmul(rng):
    x, w = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    c = rng.standard_normal((3, 2))
    return (lambda: ad.reduce_sum(ad.mul(ad.matmul(x, w), c))), [x, w]


def _conv(stride, pad):
    def case(rng):
        x, k = _leaf(rng, (2, 2, 5, 5)), _leaf(rng, (3, 2, 3, 3))
        c = rng.standard_normal(ad.conv2d(x, k, stride, pad).shape)
        return (lambda: ad.reduce_sum(ad.mul(ad.conv2d(x, k, stride, pad), c))), [x, k]
    return case


def _reductions(rng):
    x = _leaf(rng, (2, 3, 4))
    c1, c2 = rng.standard_normal((2, 4)), rng.standard_normal(3)
    return (lambda: ad.add(ad.reduce_sum(ad.mul(ad.reduce_mean(x, 1), c1)),
                           ad.reduce_sum(ad.mul(ad.reduce_sum(x, (0, 2)), c2)))), [x]


def _reshape(rng):
    x = _leaf(rng, (2, 6))
    c = rng.standard_normal((3, 4))
    return (lambda: ad.reduce_sum(ad.mul(ad.reshape(x, (3, 4)), c))), [x]


def _stop_gradient(rng):
    x = _leaf(rng, (3, 4))
    c = rng.standard_normal((3, 4))
    return (lambda: ad.reduce_sum(ad.mul(ad.add(ad.square(x), ad.stop_gradient(ad.mul(x, x))), c))), [x]


def _cross_entropy(rng):
    logits = _leaf(rng, (5, 4))
    labels = rng.integers(0, 4, 5)
    return (lambda: softmax_cross_entropy(logits, labels)), [logits]


def _bn_standard(rng):
    z = _leaf(rng, (6, 3))
    bn = BNParams.create(3)
    c = rng.standard_normal((6, 3))
    return (lambda: ad.reduce_sum(ad.mul(batchnorm_standard(z, bn, update_stats=False), c))), [z]


def _bn_conv(rng):
    z = _leaf(rng, (3, 2, 3, 3))
    bn = BNParams.create(2)
    c = rng.standard_normal((3, 2, 3, 3))
    return (lambda: ad.reduce_sum(ad.mul(batchnorm_standard(z, bn, update_stats=False), c))), [z]


def _bn_signal(rng):
    z, zs = _leaf(rng, (6, 3)), _leaf(rng, (6, 3))
    bn = BNParams.create(3)
    c = rng.standard_normal((6, 3))
    return (lambda: ad.reduce_sum(ad.mul(batchnorm_signal_stats(z, zs, bn, update_stats=False), c))), [z, zs]


def _affine(rng):
    zhat = _leaf(rng, (4, 3))
    bn = BNParams.create(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.uniform(-0.5, 0.5, 3)
    c = rng.standard_normal((4, 3))
    return (lambda: ad.reduce_sum(ad.mul(affine_activation(zhat, bn, "identity"), c))), [zhat] + bn.parameters()


def _dense_layer(rng, fan_in=4, fan_out=3):
    layer = BNLayer(init_dense(fan_in, fan_out, rng))
    layer.bn.gamma.data = rng.uniform(0.5, 1.5, fan_out)
    layer.bn.beta.data = rng.uniform(-0.5, 0.5, fan_out)
    return layer


def _conv_layer(rng, c_in=2, c_out=3):
    layer = BNLayer(init_conv(c_in, c_out, rng))
    layer.bn.gamma.data = rng.uniform(0.5, 1.5, c_out)
    layer.bn.beta.data = rng.uniform(-0.5, 0.5, c_out)
    return layer


def _dense_bn_relu(rng):
    layer = _dense_layer(rng)
    x = _leaf(rng, (6, 4))
    c = rng.standard_normal((6, 3))
    return (lambda: ad.reduce_sum(ad.mul(phi(x, layer, update_stats=False), c))), [x] + layer.parameters()


def _conv_bn_relu(rng):
    layer = _conv_layer(rng)
    x = _leaf(rng, (3, 2, 4, 4))
    c = rng.standard_normal((3, 3, 4, 4))
    return (lambda: ad.reduce_sum(ad.mul(phi(x, layer, update_stats=False), c))), [x] + layer.parameters()


def _with_head(layer, zhat_fn, x, rng):
    c = rng.standard_normal((x.shape[0], layer.params.fan_out) + x.shape[2:])

    def loss():
        return ad.reduce_sum(ad.mul(affine_activation(zhat_fn(), layer.bn, "relu"), c))

    return loss, [x] + layer.parameters()


def _mn(conv):
    def case(rng):
        layer = _conv_layer(rng) if conv else _dense_layer(rng)
        x = _leaf(rng, (3, 2, 4, 4) if conv else (6, 4))
        mask = sample_mask(SPEC, x.shape, rng)
        return _with_head(layer, lambda: psi(apply_mn(x, SPEC, mask=mask), layer, update_stats=False), x, rng)
    return case


def _weight_mn(rng):
    layer = _dense_layer(rng)
    x = _leaf(rng, (6, 4))
    mask = sample_mask(NoiseSpec(sigma=0.35, share_spatial=False), layer.params.weight.shape, rng)

    def zhat():
        noisy = apply_weight_noise(layer.params, SPEC, mask=mask)
        return batchnorm_standard(ad.matmul(x, noisy.weight), layer.bn, update_stats=False)

    return _with_head(layer, zhat, x, rng)


def _ncmn0(conv):
    def case(rng):
        layer = _conv_layer(rng) if conv else _dense_layer(rng)
        x = _leaf(rng, (3, 2, 4, 4) if conv else (6, 4))
        shape = (3, 3, 4, 4) if conv else (6, 3)
        mask = sample_mask(SPEC, shape, rng)
        return _with_head(layer, lambda: ncmn0_layer(x, layer, SPEC, mask=mask), x, rng)
    return case


def _ncmn1(conv):
    def case(rng):
        layer = _conv_layer(rng) if conv else _dense_layer(rng)
        x = _leaf(rng, (3, 2, 4, 4) if conv else (6, 4))
        mask = sample_mask(SPEC, x.shape, rng)
        return _with_head(layer, lambda: ncmn1_layer(x, layer, SPEC, mask=mask), x, rng)
    return case


def _no_stats(fn):
    # block composites update running statistics; checks must not drift them
    def wrapped():
        saved = [(l.bn, l.bn.running_mean.copy(), l.bn.running_var.copy()) for l in fn.layers]
        out = fn()
        for bn, m, v in saved:
            bn.running_mean, bn.running_var = m, v
        return out
    return wrapped


def _ncmn2(rng):
    l1, l2 = _dense_layer(rng, 4, 5), _dense_layer(rng, 5, 3)
    x = _leaf(rng, (6, 4))
    masks = (sample_mask(SPEC, (6, 4), rng), sample_mask(SPEC, (6, 5), rng))

    def zhat():
        return ncmn2_block(x, l1, l2, SPEC, masks=masks)

    zhat.layers = [l1, l2]
    loss, _ = _with_head(l2, _no_stats(zhat), x, rng)
    return loss, [x] + l1.parameters() + l2.parameters()


def _shake(mode):
    def case(rng):
        b1 = (_dense_layer(rng, 4, 5), _dense_layer(rng, 5, 3))
        b2 = (_dense_layer(rng, 4, 5), _dense_layer(rng, 5, 3))
        x = _leaf(rng, (6, 4))
        alphas = shake_alphas(ShakeConfig(mode), 6, 2, rng)

        def zhat():
            return shake_block(x, b1, b2, ShakeConfig(mode), alphas=alphas)

        zhat.layers = list(b1 + b2)
        c = rng.standard_normal((6, 3))
        params = [x] + [t for l in b1 + b2 for t in l.parameters()]
        return (lambda: ad.reduce_sum(ad.mul(_no_stats(zhat)(), c))), params
    return case


CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_broadcast": _broadcast_mul,
    "neg": _unary(ad.neg),
    "square": _unary(ad.square),
    "rsqrt": _unary(ad.rsqrt, low=0.2),
    "relu": _relu,
    "matmul": _matmul,
    "conv2d": _conv(1, 1),
    "conv2d_strided": _conv(2, 0),
    "reductions": _reductions,
    "reshape": _reshape,
    "stop_gradient": _stop_gradient,
    "softmax_cross_entropy": _cross_entropy,
    "batchnorm": _bn_standard,
    "batchnorm_conv": _bn_conv,
    "batchnorm_signal_stats": _bn_signal,
    "affine": _affine,
    "dense_bn_relu": _dense_bn_relu,
    "conv_bn_relu": _conv_bn_relu,
    "mn_dense": _mn(False),
    "mn_conv": _mn(True),
    "weight_mn": _weight_mn,
    "ncmn0_dense": _ncmn0(False),
    "ncmn0_conv": _ncmn0(True),
    "ncmn1_dense": _ncmn1(False),
    "ncmn1_conv": _ncmn1(True),
    "ncmn2": _ncmn2,
    "shake_even": _shake("even"),
    "shake_shake": _shake("shake"),
}


@dataclass
class SuiteResult:
    name: str
    instantiations: int
    max_rel_error: float
    truncated: int
    passed: bool


def run_suite(cases=None, instantiations=5, seed=0, step=1e-5, tolerance=1e-4):
    """Gradient-check each case on ``instantiations`` random draws."""
    names = list(CASES) if cases is None else list(cases)
    root = np.random.SeedSequence(seed)
    results = []
    for name, child in zip(names, root.spawn(len(names))):
        worst, truncated, ok = 0.0, 0, True
        for sub in child.spawn(instantiations):
            loss, params = CASES[name](np.random.Generator(np.random.Philox(sub)))
            rep = grad_check(loss, params, step=step, tolerance=tolerance)
            worst = max(worst, rep.max_rel_error)
            truncated += len(rep.truncated)
            ok = ok and rep.passed
        results.append(SuiteResult(name, instantiations, float(worst), truncated, bool(ok)))
    return results
