"""Versioned text checkpoints.

Layout::

    ncmn-checkpoint 1
    model {"architecture": "plain_cnn", ...}      one-line JSON
    input_shape 3 8 8
    tensor stem.w 4 16 3 3 3                      name, ndim, dims
    <all values on one line, repr of each float>
    ...
    end

Tensors are every trainable parameter in ``Model.named_parameters`` order
followed by each BN layer's running mean and variance.  Floats are written
with ``repr`` and so round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .errors import DataError
from .noise import NoiseSpec, ShakeConfig
from .training import ModelConfig, build_model

__all__ = ["CHECKPOINT_VERSION", "save_checkpoint", "load_checkpoint", "named_tensors"]

CHECKPOINT_VERSION = 1
MAGIC = "ncmn-checkpoint"


def named_tensors(model):
    """``(name, array-holder, attribute)`` for everything a checkpoint stores."""
    out = [(name, t, "data") for name, t in model.named_parameters()]
    for i, layer in enumerate(model.bn_layers()):
        out.append((f"bn{i}.running_mean", layer.bn, "running_mean"))
        out.append((f"bn{i}.running_var", layer.bn, "running_var"))
    return out


def _model_header(cfg):
    d = asdict(cfg)
    d["noise_spec"] = asdict(cfg.noise_spec)
    d["shake_cfg"] = asdict(cfg.shake_cfg) if cfg.shake_cfg is not None else None
    return json.dumps(d, sort_keys=True)


def _model_from_header(text):
    d = json.loads(text)
    d["noise_spec"] = NoiseSpec(**d["noise_spec"])
    d["shake_cfg"] = ShakeConfig(**d["shake_cfg"]) if d["shake_cfg"] is not None else None
    return ModelConfig(**d)


def save_checkpoint(path, model):
    lines = [
        f"{MAGIC} {CHECKPOINT_VERSION}",
        f"model {_model_header(model.cfg)}",
        "input_shape " + " ".join(str(n) for n in model.input_shape),
    ]
    for name, holder, attr in named_tensors(model):
        arr = np.asarray(getattr(holder, attr), dtype=np.float64)
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(n) for n in arr.shape))
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Rebuild the model stored at ``path``."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != f"{MAGIC} {CHECKPOINT_VERSION}":
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    try:
        if not lines[1].startswith("model ") or not lines[2].startswith("input_shape "):
            raise DataError(f"{path}: missing model header")
        cfg = _model_from_header(lines[1][len("model "):])
        shape = tuple(int(n) for n in lines[2].split()[1:])
        model = build_model(cfg, shape, 0)
        pos = 3
        for name, holder, attr in named_tensors(model):
            head = lines[pos].split()
            if head[:2] != ["tensor", name]:
                raise DataError(f"{path}: expected tensor {name} on line {pos + 1}")
            dims = tuple(int(n) for n in head[3:3 + int(head[2])])
            current = np.asarray(getattr(holder, attr))
            if dims != current.shape:
                raise DataError(f"{path}: {name} has shape {dims}, model expects {current.shape}")
            values = np.array([float(v) for v in lines[pos + 1].split()], dtype=np.float64)
            setattr(holder, attr, values.reshape(dims))
            pos += 2
        if lines[pos] != "end":
            raise DataError(f"{path}: trailing data after the last tensor")
    except DataError:
        raise
    except (IndexError, ValueError, KeyError, TypeError) as err:
        raise DataError(f"{path}: malformed checkpoint ({err})") from None
    return model
