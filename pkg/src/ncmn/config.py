"""Experiment configuration: a flat ``key = value`` text format.

Grammar::

    # comment                 (also after a value: ``depth = 8  # layers``)
    [section]                 optional; only checks that keys belong to it
    key = value
    seeds = 1, 2, 3           lists are comma-separated

Keys are unique across sections, so ``sigma = 0.3`` works with or without a
``[noise]`` header.  Booleans are ``true``/``false``.  An empty file gives
every default.  :func:`echo_config` writes the canonical form (all keys, in
schema order, under their section headers); parsing that text again gives
the same config, and echoing it again gives the same bytes.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Optional, Tuple

from .errors import ConfigError
from .noise import NOISE_KINDS, NoiseSpec, ShakeConfig
from .training import ARCHITECTURES, NOISE_TYPES, ModelConfig, OptimizerState, ScheduleConfig

__all__ = ["ExperimentConfig", "SCHEMA", "parse_config", "echo_config", "load_config", "output_root"]

OUTPUT_ROOT_ENV = "NCMN_OUTPUT_ROOT"
DATASETS = ("synthetic_images", "synthetic_blobs", "cifar10_binary")


def _choice(options):
    def check(v):
        if v not in options:
            return f"must be one of {', '.join(options)}"
    return check


def _at_least(lo):
    def check(v):
        if v < lo:
            return f"must be >= {lo}"
    return check


def _positive(v):
    if not v > 0:
        return "must be > 0"


def _non_negative_sigma(v):
    if not v >= 0:
        return "violates σ ≥ 0"


def _unit_open_closed(v):
    if not 0 < v <= 1:
        return "must lie in (0, 1]"


def _unit_open(v):
    if not 0 < v < 1:
        return "must lie in (0, 1)"


def _momentum(v):
    if not 0 <= v < 1:
        return "must lie in [0, 1)"


def _non_negative(v):
    if v < 0:
        return "must be >= 0"


def _seeds(v):
    if not v:
        return "needs at least one seed"
    if len(set(v)) != len(v):
        return "seeds must be distinct"
    if min(v) < 0:
        return "seeds must be non-negative"


def _optional_subset(v):
    if v is not None and v < 1:
        return "must be >= 1 (or empty for the full file)"


# key: (section, type, default, check)
SCHEMA = {
    "architecture": ("model", str, "plain_cnn", _choice(ARCHITECTURES)),
    "depth": ("model", int, 8, _at_least(1)),
    "width": ("model", int, 2, _at_least(1)),
    "base_width": ("model", int, 8, _at_least(1)),
    "noise_type": ("model", str, "none", _choice(NOISE_TYPES)),
    "skip_first_noise": ("model", bool, False, None),
    "bn_momentum": ("model", float, 0.9, _unit_open),
    "bn_eps": ("model", float, 1e-5, _positive),
    "noise_kind": ("noise", str, "uniform", _choice(NOISE_KINDS)),
    "sigma": ("noise", float, 0.35, _non_negative_sigma),
    "keep_prob": ("noise", float, 0.5, _unit_open_closed),
    "share_spatial": ("noise", bool, True, None),
    "shake_backward": ("noise", str, "shake", _choice(("even", "shake"))),
    "shake_per_sample": ("noise", bool, True, None),
    "alpha0": ("optimizer", float, 0.04, _positive),
    "weight_decay": ("optimizer", float, 5e-5, _non_negative),
    "momentum": ("optimizer", float, 0.9, _momentum),
    "epochs": ("schedule", int, 30, _at_least(0)),
    "batch_size": ("schedule", int, 64, _at_least(2)),
    "dataset": ("data", str, "synthetic_images", _choice(DATASETS)),
    "data_path": ("data", str, "", None),
    "train_subset": ("data", "optional_int", None, _optional_subset),
    "test_subset": ("data", "optional_int", None, _optional_subset),
    "class_count": ("data", int, 10, _at_least(2)),
    "samples": ("data", int, 4000, _at_least(2)),
    "test_samples": ("data", int, 1000, _at_least(1)),
    "input_dim": ("data", int, 16, _at_least(1)),
    "image_size": ("data", int, 8, _at_least(2)),
    "channels": ("data", int, 3, _at_least(1)),
    "prototypes": ("data", int, 3, _at_least(1)),
    "pixel_noise": ("data", float, 0.5, _non_negative),
    "data_seed": ("data", int, 0, _at_least(0)),
    "seeds": ("run", "int_list", (1,), _seeds),
    "output_dir": ("run", str, "runs/default", None),
    "correlation": ("run", bool, True, None),
    "snr": ("run", bool, False, None),
}

SECTIONS = tuple(dict.fromkeys(s for s, _, _, _ in SCHEMA.values()))


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment; field names match the config keys."""

    architecture: str = "plain_cnn"
    depth: int = 8
    width: int = 2
    base_width: int = 8
    noise_type: str = "none"
    skip_first_noise: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    noise_kind: str = "uniform"
    sigma: float = 0.35
    keep_prob: float = 0.5
    share_spatial: bool = True
    shake_backward: str = "shake"
    shake_per_sample: bool = True
    alpha0: float = 0.04
    weight_decay: float = 5e-5
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    dataset: str = "synthetic_images"
    data_path: str = ""
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    class_count: int = 10
    samples: int = 4000
    test_samples: int = 1000
    input_dim: int = 16
    image_size: int = 8
    channels: int = 3
    prototypes: int = 3
    pixel_noise: float = 0.5
    data_seed: int = 0
    seeds: Tuple[int, ...] = (1,)
    output_dir: str = "runs/default"
    correlation: bool = True
    snr: bool = False

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def noise_spec(self):
        return NoiseSpec(self.noise_kind, self.sigma, self.keep_prob, self.share_spatial, 0)

    def model_config(self):
        shake = ShakeConfig(self.shake_backward, self.shake_per_sample) if self.noise_type == "shake" else None
        cfg = ModelConfig(
            architecture=self.architecture,
            depth=self.depth,
            width=self.width,
            base_width=self.base_width,
            noise_type=self.noise_type,
            noise_spec=self.noise_spec(),
            shake_cfg=shake,
            class_count=self.class_count,
            skip_first_noise=self.skip_first_noise,
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
        )
        cfg.validate()
        return cfg

    def optimizer(self):
        return OptimizerState(self.momentum, self.weight_decay, self.alpha0)

    def schedule(self, steps_per_epoch):
        return ScheduleConfig(max(1, self.epochs * steps_per_epoch), self.alpha0)


def _convert(raw, kind):
    if kind is str:
        return raw
    if kind is bool:
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError("expected true or false")
        return low == "true"
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "optional_int":
        return None if raw == "" else int(raw)
    if kind == "int_list":
        return tuple(int(p) for p in raw.split(",")) if raw.strip() else ()
    raise AssertionError(kind)


def _type_name(kind):
    return {str: "text", bool: "boolean", int: "integer", float: "number",
            "optional_int": "integer or empty", "int_list": "comma-separated integers"}[kind]


def parse_config(text):
    """Parse config text; errors carry the offending line number."""
    values = {}
    seen = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]") or body[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"unknown section {body!r}; expected one of {', '.join(SECTIONS)}", line=n)
            section = body[1:-1].strip()
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", line=n)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=n)
        home, kind, _, check = SCHEMA[key]
        if section is not None and section != home:
            raise ConfigError(f"key {key!r} belongs in [{home}], not [{section}]", line=n)
        if key in seen:
            raise ConfigError(f"key {key!r} already set on line {seen[key]}", line=n)
        try:
            value = _convert(raw, kind)
        except ValueError:
            raise ConfigError(f"{key}: expected {_type_name(kind)}, got {raw!r}", line=n) from None
        problem = check(value) if check else None
        if problem:
            raise ConfigError(f"{key} = {raw}: {problem}", line=n)
        values[key] = value
        seen[key] = n
    cfg = ExperimentConfig(**values)
    _cross_check(cfg, seen)
    return cfg


def _cross_check(cfg, lines):
    def fail(msg, key):
        raise ConfigError(msg, line=lines.get(key))

    if cfg.dataset == "cifar10_binary" and not cfg.data_path:
        fail("dataset = cifar10_binary needs data_path", "dataset")
    if cfg.dataset == "cifar10_binary" and cfg.class_count != 10:
        fail("cifar10_binary has exactly 10 classes", "class_count")
    if cfg.dataset.startswith("synthetic") and cfg.train_subset is not None and cfg.train_subset > cfg.samples:
        fail(f"train_subset {cfg.train_subset} exceeds samples {cfg.samples}", "train_subset")
    if cfg.dataset.startswith("synthetic") and cfg.test_subset is not None and cfg.test_subset > cfg.test_samples:
        fail(f"test_subset {cfg.test_subset} exceeds test_samples {cfg.test_samples}", "test_subset")
    if cfg.dataset == "synthetic_blobs" and cfg.architecture != "mlp":
        fail("synthetic_blobs yields vectors; use architecture = mlp", "architecture")
    if cfg.dataset != "synthetic_blobs" and cfg.architecture == "mlp":
        fail("mlp needs vector inputs; use dataset = synthetic_blobs", "architecture")
    try:
        cfg.model_config()
    except ConfigError as err:
        where = next((k for k in ("noise_type", "depth", "architecture") if k in lines), None)
        fail(str(err), where)


def _format(value, kind):
    if kind is bool:
        return "true" if value else "false"
    if kind == "optional_int":
        return "" if value is None else str(value)
    if kind == "int_list":
        return ", ".join(str(v) for v in value)
    if kind is float:
        return repr(float(value))
    return str(value)


def echo_config(cfg):
    """Canonical text of ``cfg``: a fixed point of parse followed by echo."""
    out = []
    for section in SECTIONS:
        if out:
            out.append("")
        out.append(f"[{section}]")
        for key, (home, kind, _, _) in SCHEMA.items():
            if home == section:
                text = _format(getattr(cfg, key), kind)
                out.append(f"{key} = {text}" if text else f"{key} =")
    return "\n".join(out) + "\n"


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def output_root():
    """Base directory for relative ``output_dir`` values."""
    return os.environ.get(OUTPUT_ROOT_ENV) or os.getcwd()
