"""Bias-free dense/conv layers and batch normalization.

Two normalizations are provided.  :func:`batchnorm_standard` normalizes a
pre-activation by its own batch statistics.  :func:`batchnorm_signal_stats`
normalizes a (noisy) pre-activation by the statistics of a different (clean)
tensor.  Both use the biased batch variance, and the scale/shift is applied
separately by :func:`affine_activation`.

``psi`` and ``phi`` compose the pieces: ``psi(x) = BN(x W)`` and
``phi(x) = act(gamma * psi(x) + beta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError, ShapeError

__all__ = [
    "DenseParams",
    "ConvParams",
    "BNParams",
    "BNLayer",
    "init_dense",
    "init_conv",
    "dense_preact",
    "conv_preact",
    "preact",
    "batchnorm_standard",
    "batchnorm_signal_stats",
    "affine_activation",
    "psi",
    "phi",
    "ACTIVATIONS",
]

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseParams:
    """Weight ``[fan_in, fan_out]``; bias is off unless the layer feeds no BN."""

    weight: Tensor
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-d, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.fan_out,):
            raise ShapeError(f"dense bias must have shape ({self.fan_out},), got {self.bias.shape}")

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class ConvParams:
    """Kernel ``[c_out, c_in, kh, kw]`` with stride and zero padding."""

    weight: Tensor
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d, got {self.weight.shape}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be positive, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"conv pad must be non-negative, got {self.pad}")

    @property
    def fan_in(self):
        _, c_in, kh, kw = self.weight.shape
        return c_in * kh * kw

    @property
    def fan_out(self):
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight]


Params = Union[DenseParams, ConvParams]


@dataclass
class BNParams:
    """Per-channel scale/shift plus exponential-moving-average statistics.

    ``running = momentum * running + (1 - momentum) * batch``.  ``eps`` may be
    zero for analysis; training code always uses a positive value.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if len(c) != 1 or self.beta.shape != c:
            raise ShapeError("gamma and beta must be 1-d vectors of equal length")
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.running_mean.shape != c or self.running_var.shape != c:
            raise ShapeError("running statistics must match the channel count")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"BN momentum must lie in (0, 1), got {self.momentum}")
        if self.eps < 0:
            raise ConfigError(f"BN epsilon must be non-negative, got {self.eps}")

    @classmethod
    def create(cls, channels, momentum=0.9, eps=1e-5):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]

    def update_running(self, mean, var):
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * mean
        self.running_var = m * self.running_var + (1.0 - m) * var


@dataclass
class BNLayer:
    """A linear map followed by batch normalization (and its affine part)."""

    params: Params
    bn: BNParams = field(default=None)

    def __post_init__(self):
        if self.bn is None:
            self.bn = BNParams.create(self.params.fan_out)
        if self.bn.channels != self.params.fan_out:
            raise ShapeError("BN channel count must equal the layer's fan-out")

    def parameters(self):
        return self.params.parameters() + self.bn.parameters()


def init_dense(fan_in, fan_out, rng, bias=False):
    """He-style normal init, std ``sqrt(2 / fan_in)``."""
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    b = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None
    return DenseParams(Tensor(w, requires_grad=True), b)


def init_conv(c_in, c_out, rng, size=3, stride=1, pad=None):
    if pad is None:
        pad = size // 2
    fan_in = c_in * size * size
    w = rng.standard_normal((c_out, c_in, size, size)) * np.sqrt(2.0 / fan_in)
    return ConvParams(Tensor(w, requires_grad=True), stride=stride, pad=pad)


def dense_preact(x, p):
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != p.fan_in:
        raise ShapeError(f"dense layer expects [batch, {p.fan_in}], got {x.shape}")
    z = ad.matmul(x, p.weight)
    if p.bias is not None:
        z = ad.add(z, p.bias)
    return z


def conv_preact(x, p):
    return ad.conv2d(x, p.weight, stride=p.stride, pad=p.pad)


def preact(x, p):
    """Bias-free weighted sum of the inputs, dense or convolutional."""
    if isinstance(p, ConvParams):
        return conv_preact(x, p)
    return dense_preact(x, p)


def _stat_axes(z):
    if z.ndim == 2:
        return (0,)
    if z.ndim == 4:
        return (0, 2, 3)
    raise ShapeError(f"batch norm expects [b, f] or [b, c, h, w], got {z.shape}")


def _channel_view(v, z):
    shape = [1] * z.ndim
    shape[1] = -1
    return np.asarray(v).reshape(shape)


def _check_channels(z, bn):
    if z.shape[1] != bn.channels:
        raise ShapeError(f"BN has {bn.channels} channels, input has {z.shape[1]}")


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def _batch_moments(z, axes):
    mean = ad.reduce_mean(z, axes, keepdims=True)
    var = ad.reduce_mean(ad.square(ad.sub(z, mean)), axes, keepdims=True)
    return mean, var


def _normalize_eval(z, bn):
    if bn.eps == 0 and np.any(bn.running_var == 0):
        raise NumericError("eval-mode BN with eps=0 and a zero running variance")
    mean = _channel_view(bn.running_mean, z)
    inv = _channel_view(1.0 / np.sqrt(bn.running_var + bn.eps), z)
    return ad.mul(ad.sub(z, mean), inv)


def batchnorm_standard(z, bn, mode="train", update_stats=True):
    """Normalize each channel by its batch mean and biased batch variance.

    Conv activations pool statistics over batch and spatial axes.  In eval
    mode the running statistics are used instead and nothing is updated.
    """
    return batchnorm_signal_stats(z, z, bn, mode=mode, update_stats=update_stats)


def batchnorm_signal_stats(z, z_s, bn, mode="train", update_stats=True):
    """``(z - mean(z_s)) / sqrt(var(z_s) + eps)``, stats taken over the batch.

    Running statistics are tracked from ``z`` so that eval mode, which uses
    them for both arguments, matches the noisy training forward.
    """
    z, z_s = ad.as_tensor(z), ad.as_tensor(z_s)
    _check_mode(mode)
    if z.shape != z_s.shape:
        raise ShapeError(f"z and z_s must have equal shapes, got {z.shape} and {z_s.shape}")
    _check_channels(z, bn)
    axes = _stat_axes(z)
    if mode == "eval":
        return _normalize_eval(z, bn)
    if z.shape[0] < 2:
        raise ContractError("train-mode batch norm needs a batch of at least 2")
    mean_s, var_s = _batch_moments(z_s, axes)
    out = ad.mul(ad.sub(z, mean_s), ad.rsqrt(ad.add(var_s, bn.eps)))
    if update_stats:
        if z_s is z:
            bn.update_running(mean_s.data.reshape(-1), var_s.data.reshape(-1))
        else:
            bn.update_running(z.data.mean(axis=axes), z.data.var(axis=axes))
    return out


def affine_activation(zhat, bn, phi="relu"):
    """``phi(gamma * zhat + beta)`` with per-channel gamma and beta."""
    zhat = ad.as_tensor(zhat)
    _check_channels(zhat, bn)
    if phi not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {phi!r}")
    shape = [1] * zhat.ndim
    shape[1] = bn.channels
    y = ad.add(ad.mul(zhat, ad.reshape(bn.gamma, shape)), ad.reshape(bn.beta, shape))
    return ad.relu(y) if phi == "relu" else y


def psi(x, layer, mode="train", update_stats=True):
    """Normalized pre-activation ``BN(x W)`` of a :class:`BNLayer`."""
    return batchnorm_standard(preact(x, layer.params), layer.bn, mode, update_stats)


def phi(x, layer, mode="train", update_stats=True, activation="relu"):
    """Activation ``act(gamma * BN(x W) + beta)`` of a :class:`BNLayer`."""
    return affine_activation(psi(x, layer, mode, update_stats), layer.bn, activation)
