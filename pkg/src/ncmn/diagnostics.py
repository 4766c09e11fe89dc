"""Signal-to-noise estimators, feature-correlation metrics and gradient checks.

Notation for a single unit with weights ``w`` over inputs ``x``:
``z_s = sum_i w_i x_i`` (signal) and ``z_n = sum_i w_i v_i x_i`` (noise)
where ``v_i = u_i - 1``.  The SNR is ``Var[z_s] / E[z_n^2]``.

The closed forms below take the input moments ``mu = E[x]`` and
``M = E[x x^T]``.  With independent zero-mean ``v_i`` of variance ``s^2``::

    E[z_n^2]  = s^2 * D,               D = sum_i w_i^2 M_ii
    Var[z_s]  = D + C - (w . mu)^2,    C = sum_{i != i'} w_i w_i' M_ii'
    SNR       = (1 / s^2) * (1 + (C - (w . mu)^2) / D)

``C`` runs over ordered pairs, i.e. twice the sum over unordered pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateInputError, NumericError
from .noise import NoiseSpec, sample_mask

__all__ = [
    "InputMoments",
    "SNRReport",
    "ShakeSNR",
    "FeatureCorrelation",
    "CorrelationGroup",
    "CorrelationReport",
    "GradCheckReport",
    "snr_monte_carlo",
    "snr_analytic",
    "snr_report",
    "snr_cross_term_ratio",
    "ncmn_noise_variance",
    "ncmn_noise_variance_monte_carlo",
    "shake_snr",
    "shake_snr_formula",
    "feature_correlation",
    "correlation_report",
    "grad_check",
]

MIN_MC_SAMPLES = 10_000
_TINY = 1e-300


@dataclass
class InputMoments:
    """First and second raw moments of a layer input."""

    mean: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.second = np.asarray(self.second, dtype=np.float64)
        n = self.mean.shape[0]
        if self.second.shape != (n, n):
            raise ValueError(f"second moment must be {n}x{n}, got {self.second.shape}")

    @classmethod
    def from_samples(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), x.T @ x / x.shape[0])

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.asarray(cov, dtype=np.float64) + np.outer(mean, mean))

    @property
    def covariance(self):
        return self.second - np.outer(self.mean, self.mean)


@dataclass
class SNRReport:
    snr_monte_carlo: float
    snr_analytic: float
    relative_gap: float
    sample_count: int

    def to_dict(self):
        return {k: _jsonable(v) for k, v in self.__dict__.items()}


@dataclass
class ShakeSNR:
    """Shake-shake SNR from the moment formula and from direct simulation."""

    formula: float
    direct: float
    sample_count: int

    @property
    def relative_gap(self):
        return _rel_gap(self.direct, self.formula)


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _rel_gap(mc, analytic):
    if math.isinf(mc) and math.isinf(analytic):
        return 0.0
    return abs(mc - analytic) / max(abs(analytic), _TINY)


def _weight_matrix(weight):
    w = getattr(weight, "weight", weight)
    w = getattr(w, "data", w)
    w = np.asarray(w, dtype=np.float64)
    return (w[:, None], True) if w.ndim == 1 else (w, False)


def _squeeze(values, single):
    return float(values[0]) if single else values


def _independent(spec):
    return NoiseSpec(spec.kind, spec.sigma, spec.keep_prob, False, spec.seed)


def _draw(input_sampler, spec, n_samples, rng, n_inputs):
    if n_samples < MIN_MC_SAMPLES:
        raise ContractError(f"Monte-Carlo estimates need at least {MIN_MC_SAMPLES} samples")
    x = np.asarray(input_sampler(rng, n_samples), dtype=np.float64)
    if x.shape != (n_samples, n_inputs):
        raise ContractError(f"sampler returned {x.shape}, expected {(n_samples, n_inputs)}")
    v = sample_mask(_independent(spec), x.shape, rng).data - 1.0
    return x, v


def snr_monte_carlo(weight, input_sampler, spec, n_samples, rng):
    """Empirical ``Var[z_s] / E[z_n^2]`` over joint draws of inputs and noise.

    ``weight`` is a vector (one unit) or an ``[inputs, units]`` matrix, in
    which case one SNR per unit is returned.  ``input_sampler(rng, n)`` must
    return an ``[n, inputs]`` array.  Zero noise gives ``inf``.
    """
    w, single = _weight_matrix(weight)
    x, v = _draw(input_sampler, spec, n_samples, rng, w.shape[0])
    z_s = x @ w
    z_n = (v * x) @ w
    noise = np.mean(z_n**2, axis=0)
    signal = np.var(z_s, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(noise > 0, signal / np.where(noise > 0, noise, 1.0), np.inf)
    return _squeeze(snr, single)


def _moment_terms(w, moments):
    m = moments.second
    diag = np.einsum("iu,i->u", w**2, np.diag(m))
    total = np.einsum("iu,ij,ju->u", w, m, w)
    mean_z = moments.mean @ w
    return diag, total - diag, mean_z


def snr_cross_term_ratio(weight, moments):
    """``C / D``: the generalized correlation that the SNR rewards."""
    w, single = _weight_matrix(weight)
    diag, cross, _ = _moment_terms(w, moments)
    if np.any(diag <= 0):
        raise DegenerateInputError("E[sum_i (w_i x_i)^2] is zero")
    return _squeeze(cross / diag, single)


def snr_analytic(weight, moments, sigma):
    """Closed-form SNR from input moments for independent noise of std ``sigma``."""
    w, single = _weight_matrix(weight)
    diag, cross, mean_z = _moment_terms(w, moments)
    if np.any(diag <= 0):
        raise DegenerateInputError("E[sum_i (w_i x_i)^2] is zero")
    if sigma == 0:
        return _squeeze(np.full(diag.shape, np.inf), single)
    snr = (1.0 + (cross - mean_z**2) / diag) / sigma**2
    return _squeeze(snr, single)


def snr_report(weight, input_sampler, moments, spec, n_samples, rng):
    """Monte-Carlo and analytic SNR side by side, averaged over units."""
    mc = np.mean(np.atleast_1d(snr_monte_carlo(weight, input_sampler, spec, n_samples, rng)))
    an = np.mean(np.atleast_1d(snr_analytic(weight, moments, spec.std)))
    return SNRReport(float(mc), float(an), _rel_gap(float(mc), float(an)), int(n_samples))


def ncmn_noise_variance(weight, moments, sigma, var_signal=None):
    """Variance of the normalized noise ``z_n / sqrt(Var[z_s])``.

    ``sigma^2 * E[sum_i (w_i x_i)^2] / Var[z_s]``.  ``var_signal`` overrides
    ``Var[z_s]`` (e.g. with batch-norm statistics).
    """
    w, single = _weight_matrix(weight)
    diag, cross, mean_z = _moment_terms(w, moments)
    if var_signal is None:
        var_signal = diag + cross - mean_z**2
    var_signal = np.broadcast_to(np.asarray(var_signal, dtype=np.float64), diag.shape)
    if np.any(var_signal <= 0):
        raise DegenerateInputError("Var[z_s] is zero")
    return _squeeze(sigma**2 * diag / var_signal, single)


def ncmn_noise_variance_monte_carlo(weight, input_sampler, spec, n_samples, rng, var_signal=None):
    """Sample variance of ``z_n / sqrt(Var[z_s])``."""
    w, single = _weight_matrix(weight)
    x, v = _draw(input_sampler, spec, n_samples, rng, w.shape[0])
    z_s = x @ w
    z_n = (v * x) @ w
    if var_signal is None:
        var_signal = np.var(z_s, axis=0)
    var_signal = np.broadcast_to(np.asarray(var_signal, dtype=np.float64), z_s.shape[1:])
    if np.any(var_signal <= 0):
        raise DegenerateInputError("Var[z_s] is zero")
    return _squeeze(np.var(z_n / np.sqrt(var_signal), axis=0), single)


def shake_snr_formula(z1, z2):
    """``3 (1 + 4 E[z1 z2] / E[(z1 - z2)^2])`` from paired branch samples."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    spread = np.mean((z1 - z2) ** 2)
    if spread == 0:
        return math.inf
    return float(3.0 * (1.0 + 4.0 * np.mean(z1 * z2) / spread))


def shake_snr(branch_sampler, n_samples, rng):
    """SNR of the even-backward shake-shake output.

    ``branch_sampler(rng, n)`` returns paired branch outputs ``(z1, z2)``.
    The direct estimate draws ``v ~ U[-1/2, 1/2]`` and forms
    ``E[((z1 + z2) / 2)^2] / E[(v (z1 - z2))^2]``.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ContractError(f"Monte-Carlo estimates need at least {MIN_MC_SAMPLES} samples")
    z1, z2 = branch_sampler(rng, n_samples)
    z1 = np.asarray(z1, dtype=np.float64).reshape(-1)
    z2 = np.asarray(z2, dtype=np.float64).reshape(-1)
    formula = shake_snr_formula(z1, z2)
    v = rng.uniform(-0.5, 0.5, z1.shape)
    noise = np.mean((v * (z1 - z2)) ** 2)
    direct = math.inf if noise == 0 else float(np.mean(((z1 + z2) / 2.0) ** 2) / noise)
    return ShakeSNR(formula, direct, int(z1.size))


@dataclass
class FeatureCorrelation:
    mean_abs: float
    matrix: np.ndarray
    zero_variance: np.ndarray

    @property
    def flagged(self):
        return bool(self.zero_variance.any())


def feature_correlation(activations):
    """Mean absolute Pearson correlation over all unordered channel pairs.

    Batch and spatial axes are flattened into the sample axis.  Channels with
    zero variance get correlation 0 with every other channel and are flagged.
    """
    a = np.asarray(getattr(activations, "data", activations), dtype=np.float64)
    if a.ndim not in (2, 4):
        raise ContractError(f"expected [b, f] or [b, c, h, w] activations, got {a.shape}")
    c = a.shape[1]
    samples = np.moveaxis(a, 1, 0).reshape(c, -1)
    if c < 2 or samples.shape[1] < 2:
        raise ContractError("feature correlation needs at least 2 channels and 2 samples")
    centered = samples - samples.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.einsum("cn,cn->c", centered, centered))
    zero = norm == 0
    safe = np.where(zero, 1.0, norm)
    unit = centered / safe[:, None]
    rho = np.clip(unit @ unit.T, -1.0, 1.0)
    rho[zero, :] = 0.0
    rho[:, zero] = 0.0
    np.fill_diagonal(rho, np.where(zero, 0.0, 1.0))
    iu = np.triu_indices(c, k=1)
    return FeatureCorrelation(float(np.mean(np.abs(rho[iu]))), rho, zero)


@dataclass
class CorrelationGroup:
    feature_map_size: int
    mean_abs_corr: float
    std_across_layers: float
    layer_count: int


@dataclass
class CorrelationReport:
    groups: List[CorrelationGroup]
    per_layer: List[float]
    layer_sizes: List[int] = field(default_factory=list)
    flagged_layers: List[int] = field(default_factory=list)

    @property
    def overall(self):
        return float(np.mean(self.per_layer)) if self.per_layer else float("nan")

    def to_dict(self):
        return {
            "groups": [g.__dict__.copy() for g in self.groups],
            "per_layer": list(self.per_layer),
            "layer_sizes": list(self.layer_sizes),
            "flagged_layers": list(self.flagged_layers),
            "overall": self.overall,
        }


def correlation_report(model, batch):
    """Group post-BN feature correlations by feature-map size.

    ``model.feature_maps(batch)`` must run an eval-mode forward and return a
    list of post-normalization activations, one per measured layer (or per
    residual block).  Models without batch normalization are rejected.
    """
    if not getattr(model, "has_batchnorm", False):
        raise ContractError("correlation_report needs a batch-normalized model")
    per_layer, sizes, flagged = [], [], []
    for i, act in enumerate(model.feature_maps(batch)):
        fc = feature_correlation(act)
        per_layer.append(fc.mean_abs)
        sizes.append(int(act.shape[2]) if act.ndim == 4 else 1)
        if fc.flagged:
            flagged.append(i)
    groups = []
    for size in sorted(set(sizes), reverse=True):
        vals = np.array([v for v, s in zip(per_layer, sizes) if s == size])
        groups.append(CorrelationGroup(size, float(vals.mean()), float(vals.std()), len(vals)))
    return CorrelationReport(groups, per_layer, sizes, flagged)


@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient check.

    ``failures`` and ``truncated`` hold ``(param_index, flat_index, a, b)``
    tuples.  A truncated coordinate is one where the tape gradient differs
    from the gradient with stop-gradient disabled; that difference is
    intentional and does not count as a failure.
    """

    max_rel_error: float
    tolerance: float
    failures: List[Tuple[int, int, float, float]]
    truncated: List[Tuple[int, int, float, float]]
    checked: int

    @property
    def passed(self):
        return not self.failures and self.max_rel_error < self.tolerance


def _param_grads(params):
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def _evaluate(builder, params, truncate):
    for p in params:
        p.grad = None
    with ad.gradient_truncation(truncate):
        loss = builder()
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} in gradient check")
    return loss


def grad_check(builder, params, step=1e-5, tolerance=1e-4, floor=1e-6):
    """Compare tape gradients with central differences.

    ``builder()`` must rebuild the scalar loss from ``params`` deterministically
    (fixed masks).  Finite differences are compared to the gradient of the
    same graph with truncation disabled, using
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    _evaluate(builder, params, True).backward()
    tape = _param_grads(params)
    _evaluate(builder, params, False).backward()
    full = _param_grads(params)
    for p in params:
        p.grad = None

    worst = 0.0
    failures, truncated = [], []
    checked = 0
    for k, p in enumerate(params):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = _evaluate(builder, params, False).item()
            flat[idx] = orig - step
            down = _evaluate(builder, params, False).item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = full[k].reshape(-1)[idx]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
            if err >= tolerance:
                failures.append((k, idx, float(analytic), float(numeric)))
            kept = tape[k].reshape(-1)[idx]
            if abs(kept - analytic) > 1e-12 * max(1.0, abs(analytic)):
                truncated.append((k, idx, float(kept), float(analytic)))
    for p in params:
        p.grad = None
    return GradCheckReport(worst, tolerance, failures, truncated, checked)
