"""Model construction, loss, optimizer, learning-rate schedule and training loop.

Architectures
-------------
``mlp``
    Dense layers on ``[batch, features]`` inputs.
``plain_cnn``
    ``depth`` 3x3 conv layers, each followed by BN and ReLU, split over up to
    three stages whose widths double (and whose spatial size halves) from one
    stage to the next; then global average pooling and a linear classifier.
    This is the residual network with its skip connections removed.
``residual``
    Same stem, then blocks of two conv layers with an identity (or 1x1
    projection) shortcut: ``relu(shortcut(h) + gamma * z + beta)``.
``residual_2branch``
    Like ``residual`` with two parallel branches whose normalized outputs are
    averaged (randomly weighted under shake-shake).

The first layer (stem) sees the raw input and never receives noise.  Every
other layer is a "body" layer; per-layer noise types (``mn``, ``weight_mn``,
``ncmn0``, ``ncmn1``) apply to each body layer, block noise types
(``ncmn2``, ``shake``) to each pair of body layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, DivergenceError, NumericError
from .layers import (
    BNLayer,
    BNParams,
    DenseParams,
    affine_activation,
    batchnorm_standard,
    dense_preact,
    init_conv,
    init_dense,
    preact,
    psi,
)
from .noise import (
    NoiseSpec,
    ShakeConfig,
    apply_mn,
    apply_weight_noise,
    make_rng,
    mix_branches,
    ncmn0_layer,
    ncmn1_layer,
    ncmn2_block,
    shake_block,
)

__all__ = [
    "ARCHITECTURES",
    "NOISE_TYPES",
    "ModelConfig",
    "Model",
    "Dataset",
    "OptimizerState",
    "ScheduleConfig",
    "EpochRecord",
    "TrainReport",
    "build_model",
    "softmax_cross_entropy",
    "cosine_lr",
    "sgd_step",
    "evaluate",
    "steps_per_epoch",
    "train",
    "seed_streams",
]

ARCHITECTURES = ("mlp", "plain_cnn", "residual", "residual_2branch")
NOISE_TYPES = ("none", "mn", "weight_mn", "ncmn0", "ncmn1", "ncmn2", "shake")
_LAYER_NOISE = ("mn", "weight_mn", "ncmn0", "ncmn1")


@dataclass
class ModelConfig:
    architecture: str = "plain_cnn"
    depth: int = 8
    width: int = 1
    base_width: int = 16
    noise_type: str = "none"
    noise_spec: NoiseSpec = field(default_factory=NoiseSpec)
    shake_cfg: Optional[ShakeConfig] = None
    class_count: int = 10
    skip_first_noise: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.noise_type not in NOISE_TYPES:
            raise ConfigError(f"unknown noise_type {self.noise_type!r}")
        if self.depth < 1 or self.width < 1 or self.base_width < 1:
            raise ConfigError("depth, width and base_width must be positive")
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        body = self.depth - 1
        paired = self.architecture in ("residual", "residual_2branch") or self.noise_type == "ncmn2"
        if paired and (body < 2 or body % 2):
            raise ConfigError(
                f"{self.architecture}/{self.noise_type} pairs layers into blocks; "
                f"depth - 1 = {body} must be even and positive"
            )
        if self.noise_type == "shake" and self.architecture != "residual_2branch":
            raise ConfigError("shake noise requires the residual_2branch architecture")
        if self.noise_type == "ncmn2" and self.architecture == "residual_2branch":
            raise ConfigError("ncmn2 is not defined for residual_2branch; use shake")


def seed_streams(seed, n=3):
    """Independent Philox generators for init, data order and noise."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


class _Single:
    def __init__(self, layer, noisy):
        self.layer = layer
        self.noisy = noisy

    def layers(self):
        return [self.layer]

    def parameters(self):
        return self.layer.parameters()


class _Pair:
    def __init__(self, l1, l2, noisy):
        self.l1, self.l2 = l1, l2
        self.noisy = noisy

    def layers(self):
        return [self.l1, self.l2]

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters()


class _Residual(_Pair):
    def __init__(self, l1, l2, noisy, shortcut):
        super().__init__(l1, l2, noisy)
        self.shortcut = shortcut

    def parameters(self):
        extra = self.shortcut.parameters() if self.shortcut is not None else []
        return super().parameters() + extra


class _TwoBranch:
    def __init__(self, branch1, branch2, noisy, shortcut):
        self.branch1, self.branch2 = branch1, branch2
        self.noisy = noisy
        self.shortcut = shortcut

    def layers(self):
        return list(self.branch1) + list(self.branch2)

    def parameters(self):
        out = [t for l in self.layers() for t in l.parameters()]
        return out + (self.shortcut.parameters() if self.shortcut is not None else [])


class Model:
    """A built network.  Call :meth:`forward` with ``mode='train'|'eval'``."""

    has_batchnorm = True

    def __init__(self, cfg, input_shape, stem, units, classifier):
        self.cfg = cfg
        self.input_shape = tuple(input_shape)
        self.stem = stem
        self.units = units
        self.classifier = classifier

    def named_parameters(self):
        out = [(f"stem.{n}", t) for n, t in zip(("w", "gamma", "beta"), self.stem.parameters())]
        for i, unit in enumerate(self.units):
            out.extend((f"unit{i}.p{j}", t) for j, t in enumerate(unit.parameters()))
        out.append(("classifier.w", self.classifier.weight))
        out.append(("classifier.b", self.classifier.bias))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def bn_layers(self):
        return [self.stem] + [l for u in self.units for l in u.layers()]

    def parameter_count(self):
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    # -- forward ---------------------------------------------------------

    def _layer_zhat(self, h, layer, noisy, mode, rng):
        nt = self.cfg.noise_type if noisy and mode == "train" else "none"
        spec = self.cfg.noise_spec
        if nt == "mn":
            return psi(apply_mn(h, spec, rng), layer)
        if nt == "weight_mn":
            return batchnorm_standard(preact(h, apply_weight_noise(layer.params, spec, rng)), layer.bn)
        if nt == "ncmn0":
            return ncmn0_layer(h, layer, spec, rng)
        if nt == "ncmn1":
            return ncmn1_layer(h, layer, spec, rng)
        return psi(h, layer, mode)

    def _layer(self, h, layer, noisy, mode, rng, trace):
        zhat = self._layer_zhat(h, layer, noisy, mode, rng)
        if trace is not None:
            trace.append(zhat.data)
        return affine_activation(zhat, layer.bn, "relu")

    def _pair_zhat(self, h, unit, mode, rng, trace):
        if unit.noisy and mode == "train" and self.cfg.noise_type == "ncmn2":
            return ncmn2_block(h, unit.l1, unit.l2, self.cfg.noise_spec, rng)
        h1 = self._layer(h, unit.l1, unit.noisy, mode, rng, trace)
        return self._layer_zhat(h1, unit.l2, unit.noisy, mode, rng)

    def _branch_zhat(self, h, branch, noisy, mode, rng):
        l1, l2 = branch
        h1 = self._layer(h, l1, noisy, mode, rng, None)
        return self._layer_zhat(h1, l2, noisy, mode, rng)

    def _unit(self, h, unit, mode, rng, trace):
        if isinstance(unit, _Single):
            return self._layer(h, unit.layer, unit.noisy, mode, rng, trace)
        if isinstance(unit, (_Residual, _TwoBranch)):
            skip = h if unit.shortcut is None else preact(h, unit.shortcut)
        if isinstance(unit, _TwoBranch):
            if unit.noisy and mode == "train" and self.cfg.noise_type == "shake":
                zhat = shake_block(h, unit.branch1, unit.branch2, self.cfg.shake_cfg or ShakeConfig(), rng)
            else:
                z1 = self._branch_zhat(h, unit.branch1, unit.noisy, mode, rng)
                z2 = self._branch_zhat(h, unit.branch2, unit.noisy, mode, rng)
                zhat = mix_branches(z1, z2, 0.5)
            out = ad.relu(ad.add(skip, affine_activation(zhat, unit.branch2[1].bn, "identity")))
        elif isinstance(unit, _Residual):
            zhat = self._pair_zhat(h, unit, mode, rng, None)
            out = ad.relu(ad.add(skip, affine_activation(zhat, unit.l2.bn, "identity")))
        else:
            zhat = self._pair_zhat(h, unit, mode, rng, trace)
            if trace is not None:
                trace.append(zhat.data)
            return affine_activation(zhat, unit.l2.bn, "relu")
        if trace is not None:
            trace.append(out.data)
        return out

    def forward(self, x, mode="train", rng=None, trace=None):
        """Logits for a batch.  ``trace`` collects measured activations."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = ad.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ContractError(f"model expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        h = affine_activation(psi(x, self.stem, mode), self.stem.bn, "relu")
        for unit in self.units:
            h = self._unit(h, unit, mode, rng, trace)
        if h.ndim == 4:
            h = ad.reduce_mean(h, (2, 3))
        return dense_preact(h, self.classifier)

    __call__ = forward

    def feature_maps(self, x, batch_size=256):
        """Eval-mode activations after BN of every measured layer.

        Plain networks report the normalized pre-activation of each body
        layer; residual networks report each block's output.
        """
        x = np.asarray(x, dtype=np.float64)
        chunks = []
        with ad.no_grad():
            for start in range(0, x.shape[0], batch_size):
                trace = []
                self.forward(x[start:start + batch_size], "eval", trace=trace)
                chunks.append(trace)
        return [np.concatenate(parts, axis=0) for parts in zip(*chunks)]


def _stage_of(index, count, n_stages=3):
    return min(n_stages - 1, index * n_stages // count) if count else 0


def build_model(cfg, input_shape, rng):
    """Instantiate ``cfg`` for inputs of shape ``input_shape`` (without batch).

    Parameters are drawn in a fixed order that depends only on the
    architecture, so the noise type never changes the initialization.
    """
    cfg.validate()
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    input_shape = tuple(int(n) for n in input_shape)
    image = len(input_shape) == 3
    if cfg.architecture == "mlp" and image:
        raise ConfigError("mlp expects [features] inputs; flatten images first")
    if cfg.architecture != "mlp" and not image:
        raise ConfigError(f"{cfg.architecture} expects [channels, height, width] inputs")

    def bn(c):
        return BNParams.create(c, cfg.bn_momentum, cfg.bn_eps)

    def make(c_in, c_out, stride=1):
        p = init_conv(c_in, c_out, rng, 3, stride) if image else init_dense(c_in, c_out, rng)
        return BNLayer(p, bn(c_out))

    hidden = cfg.base_width * cfg.width
    stem_width = cfg.base_width if image else hidden
    stem = make(input_shape[0], stem_width)
    body = cfg.depth - 1
    first_noisy = 1 if cfg.skip_first_noise else 0
    units = []
    if cfg.architecture in ("mlp", "plain_cnn"):
        c = stem_width
        layers = []
        for i in range(body):
            stage = _stage_of(i, body) if image else 0
            c_out = hidden * 2**stage
            prev_stage = _stage_of(i - 1, body) if i and image else 0
            stride = 2 if image and i and stage != prev_stage else 1
            layers.append(make(c, c_out, stride))
            c = c_out
        if cfg.noise_type == "ncmn2":
            units = [_Pair(layers[i], layers[i + 1], i >= first_noisy) for i in range(0, body, 2)]
        else:
            units = [_Single(l, i >= first_noisy) for i, l in enumerate(layers)]
        final = c
    else:
        c = stem_width
        blocks = body // 2
        for b in range(blocks):
            stage = _stage_of(b, blocks)
            prev_stage = _stage_of(b - 1, blocks) if b else 0
            stride = 2 if b and stage != prev_stage else 1
            c_out = hidden * 2**stage
            noisy = 2 * b >= first_noisy
            if cfg.architecture == "residual":
                l1, l2 = make(c, c_out, stride), make(c_out, c_out)
                short = init_conv(c, c_out, rng, 1, stride, 0) if (stride != 1 or c != c_out) else None
                units.append(_Residual(l1, l2, noisy, short))
            else:
                br1 = (make(c, c_out, stride), make(c_out, c_out))
                br2 = (make(c, c_out, stride), make(c_out, c_out))
                short = init_conv(c, c_out, rng, 1, stride, 0) if (stride != 1 or c != c_out) else None
                units.append(_TwoBranch(br1, br2, noisy, short))
            c = c_out
        final = c
    w = rng.standard_normal((final, cfg.class_count)) * math.sqrt(1.0 / final)
    classifier = DenseParams(Tensor(w, requires_grad=True), Tensor(np.zeros(cfg.class_count), requires_grad=True))
    return Model(cfg, input_shape, stem, units, classifier)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DataError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - shifted[rows, labels])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return ad.make_node(np.asarray(loss), (logits,), bw)


@dataclass
class ScheduleConfig:
    total_steps: int
    base_lr: float = 0.04
    shape: str = "cosine"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be at least 1")
        if self.shape != "cosine":
            raise ConfigError(f"unsupported schedule shape {self.shape!r}")


def cosine_lr(t, sched):
    """``base_lr * (1 + cos(pi * t / T)) / 2`` for ``0 <= t <= T``."""
    if not 0 <= t <= sched.total_steps:
        raise ContractError(f"step {t} outside [0, {sched.total_steps}]")
    return sched.base_lr * (1.0 + math.cos(math.pi * t / sched.total_steps)) / 2.0


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 5e-5
    base_lr: float = 0.04
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, grads, state, lr, names=None):
    """``v <- mu v + g + lambda theta``; ``theta <- theta - lr v``."""
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = state.momentum * state.velocity[i] + g + state.weight_decay * p.data
        state.velocity[i] = v
        p.data = p.data - lr * v


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    class_count: int

    @property
    def input_shape(self):
        return self.x_train.shape[1:]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def final(self):
        return self.records[-1]

    def losses(self):
        return [r.train_loss for r in self.records]

    def to_dict(self):
        return {"records": [asdict(r) for r in self.records]}


def evaluate(model, x, y, batch_size=256):
    """Eval-mode (noise off, running BN stats) loss and accuracy."""
    total, correct = 0.0, 0
    with ad.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits = model.forward(xb, "eval")
            total += softmax_cross_entropy(logits, yb).item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    n = x.shape[0]
    return total / n, correct / n


def steps_per_epoch(n, batch_size):
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def train(model, dataset, epochs, opt, sched, rng, batch_size=64, on_epoch=None):
    """Minibatch SGD with a cosine schedule.

    ``rng`` is a seed or a generator; data order and noise masks come from
    two independent child streams.  Epoch 0 records the initial model.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    if dataset.x_train.shape[0] < 2 or batch_size < 2:
        raise ContractError("training needs at least 2 samples and batch_size >= 2")
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    data_rng, noise_rng = rng.spawn(2)
    n = dataset.x_train.shape[0]
    per_epoch = steps_per_epoch(n, batch_size)
    if epochs * per_epoch > sched.total_steps:
        raise ContractError(f"schedule has {sched.total_steps} steps, training needs {epochs * per_epoch}")
    params = model.parameters()
    names = [name for name, _ in model.named_parameters()]
    report = TrainReport()

    def record(epoch, lr, train_loss, train_acc):
        eval_loss, eval_acc = evaluate(model, dataset.x_test, dataset.y_test)
        report.records.append(EpochRecord(epoch, lr, train_loss, train_acc, eval_loss, eval_acc))
        if on_epoch is not None:
            on_epoch(report.records[-1])

    init_loss, init_acc = evaluate(model, dataset.x_train, dataset.y_train)
    record(0, cosine_lr(0, sched), init_loss, init_acc)
    step = 0
    for epoch in range(1, epochs + 1):
        order = data_rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        lr = cosine_lr(step, sched)
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb, yb = dataset.x_train[idx], dataset.y_train[idx]
            lr = cosine_lr(step, sched)
            logits = model.forward(xb, "train", noise_rng)
            loss = softmax_cross_entropy(logits, yb)
            value = loss.item()
            if not math.isfinite(value):
                snapshot = {"epoch": epoch, "step": step, "loss": value, "lr": lr}
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", snapshot, report)
            model.zero_grad()
            loss.backward()
            sgd_step(params, [p.grad for p in params], opt, lr, names)
            loss_sum += value * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            seen += len(yb)
            step += 1
        record(epoch, lr, loss_sum / seen, correct / seen)
    return report
