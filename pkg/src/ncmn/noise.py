"""Multiplicative noise and its non-correlating variants.

All masks have unit mean.  Standard multiplicative noise multiplies a layer's
input by the mask and lets gradients flow through the noisy product.  The
non-correlating variants (``ncmn0``, ``ncmn1``, ``ncmn2``) and shake-shake
instead write the layer output as ``signal + stop_gradient(noise)``: the
forward value is the noisy one, while gradients only see the clean signal
path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, stop_gradient
from .errors import ConfigError, ContractError, ShapeError
from .layers import ConvParams, DenseParams, batchnorm_standard, phi, preact, psi

__all__ = [
    "NOISE_KINDS",
    "NoiseSpec",
    "ShakeConfig",
    "make_rng",
    "sample_mask",
    "apply_mn",
    "apply_weight_noise",
    "ncmn0_layer",
    "ncmn1_layer",
    "ncmn2_block",
    "shake_block",
    "shake_alphas",
]

NOISE_KINDS = ("uniform", "gaussian", "bernoulli_dropout")
SHAKE_BACKWARD_MODES = ("even", "shake")


def make_rng(seed):
    """Counter-based generator (Philox), so runs are bit-reproducible."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of a unit-mean multiplicative mask.

    ``uniform`` draws from ``[1 - sigma*sqrt(3), 1 + sigma*sqrt(3)]``,
    ``gaussian`` from ``N(1, sigma^2)`` and ``bernoulli_dropout`` returns
    ``m / keep_prob`` with ``m ~ Bernoulli(keep_prob)``.
    """

    kind: str = "uniform"
    sigma: float = 0.35
    keep_prob: float = 0.5
    share_spatial: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not self.sigma >= 0:
            raise ConfigError(f"noise sigma must satisfy sigma >= 0, got {self.sigma}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    @property
    def variance(self):
        if self.kind == "bernoulli_dropout":
            return (1.0 - self.keep_prob) / self.keep_prob
        return self.sigma**2

    @property
    def std(self):
        return math.sqrt(self.variance)

    @property
    def is_identity(self):
        return self.variance == 0.0


@dataclass(frozen=True)
class ShakeConfig:
    """Shake-shake branch weights.

    ``backward_mode='even'`` uses 1/2 for both branches in the backward pass;
    ``'shake'`` draws an independent weight.  ``fixed_alpha`` pins the
    forward weight (``0.5`` disables the noise entirely).
    """

    backward_mode: str = "shake"
    per_sample: bool = True
    fixed_alpha: Optional[float] = None

    def __post_init__(self):
        if self.backward_mode not in SHAKE_BACKWARD_MODES:
            raise ConfigError(f"backward_mode must be one of {SHAKE_BACKWARD_MODES}")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")


def _mask_shape(spec, shape):
    shape = tuple(int(n) for n in shape)
    if spec.share_spatial and len(shape) == 4:
        return shape[:2] + (1, 1)
    return shape


def sample_mask(spec, shape, rng=None):
    """Draw a constant unit-mean mask.

    With ``share_spatial`` and a ``[b, c, h, w]`` shape the mask has shape
    ``[b, c, 1, 1]`` and broadcasts across spatial positions.  On 2-d shapes
    the flag has no effect.
    """
    if rng is None:
        rng = make_rng(spec.seed)
    size = _mask_shape(spec, shape)
    if spec.is_identity:
        return Tensor(np.ones(size))
    if spec.kind == "uniform":
        half = spec.sigma * math.sqrt(3.0)
        u = rng.uniform(1.0 - half, 1.0 + half, size)
    elif spec.kind == "gaussian":
        u = 1.0 + spec.sigma * rng.standard_normal(size)
    else:
        u = (rng.random(size) < spec.keep_prob) / spec.keep_prob
    return Tensor(u)


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def apply_mn(x, spec, rng=None, mode="train", mask=None):
    """``u * x`` with a fresh mask in training, identity in eval."""
    _check_mode(mode)
    x = ad.as_tensor(x)
    if mode == "eval":
        return x
    u = mask if mask is not None else sample_mask(spec, x.shape, rng)
    return ad.mul(x, u)


def apply_weight_noise(p, spec, rng=None, mode="train", mask=None):
    """A copy of ``p`` whose weight is ``u * W`` with one mask entry per weight.

    Gradients still reach the original weight through the product.
    """
    _check_mode(mode)
    if mode == "eval":
        return p
    if mask is None:
        flat = NoiseSpec(spec.kind, spec.sigma, spec.keep_prob, False, spec.seed)
        mask = sample_mask(flat, p.weight.shape, rng)
    w = ad.mul(p.weight, mask)
    if isinstance(p, ConvParams):
        return ConvParams(w, stride=p.stride, pad=p.pad)
    return DenseParams(w, p.bias)


def ncmn1_layer(x, layer, spec, rng=None, mode="train", mask=None):
    """``BN(z_s) + stop_gradient(BN(z) - BN(z_s))`` with ``z = (u * x) W``.

    The forward value is ``BN(z)``; gradients only flow through the clean
    ``BN(z_s)``.  Running statistics are tracked from the noisy ``z``.
    """
    _check_mode(mode)
    x = ad.as_tensor(x)
    if mode == "eval":
        if mask is not None:
            raise ContractError("ncmn1_layer called in eval mode with a live mask")
        return psi(x, layer, "eval")
    u = mask if mask is not None else sample_mask(spec, x.shape, rng)
    signal = batchnorm_standard(preact(x, layer.params), layer.bn, update_stats=False)
    noisy = batchnorm_standard(preact(ad.mul(x, u), layer.params), layer.bn)
    return ad.add(signal, stop_gradient(ad.sub(noisy, signal)))


def ncmn0_layer(x, layer, spec, rng=None, mode="train", mask=None):
    """``zhat + stop_gradient((u - 1) * zhat)`` with ``zhat = BN(x W)``."""
    _check_mode(mode)
    signal = psi(x, layer, mode)
    if mode == "eval":
        return signal
    u = mask if mask is not None else sample_mask(spec, signal.shape, rng)
    v = ad.as_tensor(u.data - 1.0)
    return ad.add(signal, stop_gradient(ad.mul(signal, v)))


def _shared(a, b):
    ids = {id(t) for t in a.parameters()}
    return any(id(t) in ids for t in b.parameters())


def ncmn2_block(x, layer1, layer2, spec, rng=None, mode="train", masks=None, activation="relu"):
    """Two-layer non-correlating noise.

    The clean signal is ``psi2(phi1(x))``; the noise is generated by running
    the same two layers with independent masks on both layer inputs and is
    added through ``stop_gradient``.  Returns the normalized pre-activation of
    the second layer (before its scale and shift).
    """
    _check_mode(mode)
    if layer1 is layer2 or _shared(layer1, layer2):
        raise ConfigError("ncmn2 block layers must not share parameters")
    x = ad.as_tensor(x)
    if mode == "eval":
        return psi(phi(x, layer1, "eval", activation=activation), layer2, "eval")
    signal = psi(phi(x, layer1, update_stats=False, activation=activation), layer2, update_stats=False)
    if masks is None:
        u1 = sample_mask(spec, x.shape, rng)
        h = phi(ad.mul(x, u1), layer1, activation=activation)
        u2 = sample_mask(spec, h.shape, rng)
    else:
        u1, u2 = masks
        h = phi(ad.mul(x, u1), layer1, activation=activation)
    noisy = psi(ad.mul(h, u2), layer2)
    return ad.add(signal, stop_gradient(ad.sub(noisy, signal)))


def _branch_output(x, branch, mode, activation):
    layer1, layer2 = branch
    return psi(phi(x, layer1, mode, activation=activation), layer2, mode)


def shake_alphas(cfg, batch, ndim, rng):
    """Forward and backward branch weights, shaped to broadcast over a batch."""
    shape = (batch,) + (1,) * (ndim - 1) if cfg.per_sample else (1,) * ndim
    if cfg.fixed_alpha is not None:
        alpha = np.full(shape, float(cfg.fixed_alpha))
    else:
        alpha = rng.uniform(0.0, 1.0, shape)
    if cfg.backward_mode == "even":
        alpha_bw = np.full(shape, 0.5)
    else:
        alpha_bw = rng.uniform(0.0, 1.0, shape)
    return alpha, alpha_bw


def mix_branches(z1, z2, weight):
    """``weight * z1 + (1 - weight) * z2``."""
    w = np.asarray(weight, dtype=np.float64)
    return ad.add(ad.mul(z1, w), ad.mul(z2, 1.0 - w))


def shake_block(x, branch1, branch2, cfg, rng=None, mode="train", alphas=None, activation="relu"):
    """Randomly weighted average of two residual branches.

    Each branch is a pair of :class:`BNLayer`.  The output is
    ``a' z1 + (1 - a') z2 + stop_gradient((a - a') (z1 - z2))``: forward weight
    ``a``, backward weight ``a'``.  Eval mode averages with weight 1/2.
    """
    _check_mode(mode)
    x = ad.as_tensor(x)
    z1 = _branch_output(x, branch1, mode, activation)
    z2 = _branch_output(x, branch2, mode, activation)
    if z1.shape != z2.shape:
        raise ShapeError(f"shake branches disagree: {z1.shape} vs {z2.shape}")
    if mode == "eval":
        return mix_branches(z1, z2, 0.5)
    if alphas is None:
        alpha, alpha_bw = shake_alphas(cfg, z1.shape[0], z1.ndim, rng)
    else:
        alpha, alpha_bw = (np.asarray(a, dtype=np.float64) for a in alphas)
    noise = ad.mul(ad.sub(z1, z2), alpha - alpha_bw)
    return ad.add(mix_branches(z1, z2, alpha_bw), stop_gradient(noise))
