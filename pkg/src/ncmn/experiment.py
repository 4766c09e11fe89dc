"""Multi-seed experiments, noise-variance sweeps and their report files.

One experiment directory holds::

    config.txt          canonical echo of the parsed config
    epochs.csv          one row per (seed, epoch), columns EPOCH_COLUMNS
    summary.json        per-seed results and mean / population std over seeds
    model_seed<N>.ckpt  final parameters of each seed's run

Everything except the ``metadata`` block of ``summary.json`` is a pure
function of the config, so reruns are byte-identical.  The metadata block
holds the timestamp, versions and a SHA-256 of the rest of the summary.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import echo_config, output_root
from .data import load_cifar10_binary, standardize, synthetic_blobs, synthetic_images
from .diagnostics import InputMoments, correlation_report, snr_report
from .errors import ConfigError, DataError, DivergenceError
from .training import Dataset, build_model, seed_streams, steps_per_epoch, train

__all__ = [
    "EPOCH_COLUMNS",
    "SWEEP_COLUMNS",
    "load_dataset",
    "mean_std",
    "resolve_output_dir",
    "run_experiment",
    "sweep_noise_variance",
    "RunResult",
    "SweepReport",
]

EPOCH_COLUMNS = ("seed", "epoch", "lr", "train_loss", "train_acc", "eval_loss", "eval_acc")
SWEEP_COLUMNS = ("width", "sigma", "sigma_sq", "mean_error", "std_error", "best")
SNR_SAMPLES = 100_000


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def mean_std(values):
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def resolve_output_dir(cfg, root=None):
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path(root if root is not None else output_root()) / out
    return out


def _subset(ds, train_n, test_n):
    if train_n is None and test_n is None:
        return ds
    xtr, ytr = ds.x_train[:train_n], ds.y_train[:train_n]
    xte, yte = ds.x_test[:test_n], ds.y_test[:test_n]
    xtr, xte = standardize(xtr, xte)
    return Dataset(xtr, ytr, xte, yte, ds.class_count)


def load_dataset(cfg):
    """The dataset described by an :class:`ExperimentConfig`."""
    if cfg.dataset == "cifar10_binary":
        root = Path(cfg.data_path)
        if root.is_dir():
            train_files = sorted(root.glob("data_batch_*.bin"))
            test_files = [root / "test_batch.bin"]
            if not train_files or not test_files[0].exists():
                raise DataError(f"{root}: expected data_batch_*.bin and test_batch.bin")
        else:
            raise DataError(f"{root}: data_path must be a directory of CIFAR-10 binary batches")
        return load_cifar10_binary(train_files, test_files, cfg.train_subset, cfg.test_subset)
    if cfg.dataset == "synthetic_blobs":
        ds = synthetic_blobs(cfg.class_count, cfg.input_dim, cfg.samples, cfg.data_seed, cfg.test_samples)
    else:
        ds = synthetic_images(cfg.class_count, cfg.samples, cfg.test_samples, cfg.channels, cfg.image_size,
                              cfg.prototypes, cfg.pixel_noise, cfg.data_seed)
    return _subset(ds, cfg.train_subset, cfg.test_subset)


def _patches(h, params):
    """Rows are the receptive-field inputs of ``params`` (im2col for convs)."""
    if h.ndim == 2:
        return h
    _, c, kh, kw = params.weight.shape
    hp = np.pad(h, ((0, 0), (0, 0), (params.pad, params.pad), (params.pad, params.pad)))
    win = np.lib.stride_tricks.sliding_window_view(hp, (kh, kw), axis=(2, 3))[:, :, ::params.stride, ::params.stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)


def _first_body_snr(model, cfg, x, rng):
    """SNR of the first noisy layer on its (clean, eval-mode) input."""
    from . import autodiff as ad
    from .layers import affine_activation, psi

    layer = model.bn_layers()[1] if len(model.bn_layers()) > 1 else None
    if layer is None or cfg.sigma == 0 and cfg.noise_kind != "bernoulli_dropout":
        return None
    with ad.no_grad():
        h = affine_activation(psi(x, model.stem, "eval"), model.stem.bn, "relu").data
    rows = _patches(h, layer.params)
    w = layer.params.weight.data
    w = w.reshape(w.shape[0], -1).T if w.ndim == 4 else w

    def sampler(r, n):
        return rows[r.integers(0, rows.shape[0], n)]

    rep = snr_report(w, sampler, InputMoments.from_samples(rows), cfg.noise_spec(), SNR_SAMPLES, rng)
    return rep.to_dict()


@dataclass
class RunResult:
    output_dir: Path
    summary: dict
    rows: List[tuple] = field(default_factory=list)


def _summary_bytes(summary):
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False).encode("utf-8")


def _write_summary(path, body):
    digest = hashlib.sha256(_summary_bytes(body)).hexdigest()
    meta = {
        "tool": "ncmn",
        "version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "content_sha256": digest,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"metadata": meta, **body}, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path, rows):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(EPOCH_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _aggregate(per_seed):
    out = {}
    for key in ("eval_acc", "eval_loss", "train_acc", "train_loss", "mean_abs_corr"):
        vals = [r[key] for r in per_seed if r.get(key) is not None]
        if len(vals) == len(per_seed) and vals:
            m, s = mean_std(vals)
            out[key] = {"mean": m, "std": s}
    if "eval_acc" in out:
        out["eval_error"] = {"mean": 1.0 - out["eval_acc"]["mean"], "std": out["eval_acc"]["std"]}
    return out


def run_experiment(cfg, root=None, dataset=None, log=None):
    """Train every seed of ``cfg`` and write the report files.

    Returns a :class:`RunResult`.  On divergence the rows so far and a
    summary with ``status = "diverged"`` are written before
    :class:`DivergenceError` propagates.
    """
    out = resolve_output_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config()
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.class_count != cfg.class_count:
        raise ConfigError(f"dataset has {ds.class_count} classes, config says {cfg.class_count}")
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(echo_config(cfg))

    rows, per_seed = [], []
    body = {"config": echo_config(cfg), "seeds": list(cfg.seeds), "status": "ok",
            "noise_type": cfg.noise_type, "sigma": cfg.sigma, "width": cfg.width}
    per_epoch = steps_per_epoch(ds.x_train.shape[0], cfg.batch_size)
    for seed in cfg.seeds:
        init_rng, train_rng, diag_rng = seed_streams(seed)
        model = build_model(model_cfg, ds.input_shape, init_rng)

        def on_epoch(rec, seed=seed):
            rows.append((seed, rec.epoch, rec.lr, rec.train_loss, rec.train_acc, rec.eval_loss, rec.eval_acc))
            if log is not None:
                log(f"seed {seed} epoch {rec.epoch}: train loss {rec.train_loss:.4f} eval acc {rec.eval_acc:.4f}")

        try:
            report = train(model, ds, cfg.epochs, cfg.optimizer(), cfg.schedule(per_epoch), train_rng,
                           cfg.batch_size, on_epoch)
        except DivergenceError as err:
            body.update(status="diverged", error=str(err), diverged_seed=seed, per_seed=per_seed,
                        aggregate=_aggregate(per_seed))
            _write_csv(out / "epochs.csv", rows)
            _write_summary(out / "summary.json", body)
            raise
        final = report.final
        result = {"seed": seed, "eval_acc": final.eval_acc, "eval_loss": final.eval_loss,
                  "train_acc": final.train_acc, "train_loss": final.train_loss}
        if cfg.correlation:
            corr = correlation_report(model, ds.x_test)
            result["mean_abs_corr"] = corr.overall
            result["correlation"] = corr.to_dict()
        if cfg.snr:
            result["snr"] = _first_body_snr(model, cfg, ds.x_test, diag_rng)
        per_seed.append(result)
        save_checkpoint(out / f"model_seed{seed}.ckpt", model)

    body["per_seed"] = per_seed
    body["aggregate"] = _aggregate(per_seed)
    _write_csv(out / "epochs.csv", rows)
    _write_summary(out / "summary.json", body)
    return RunResult(out, body, rows)


@dataclass
class SweepReport:
    rows: List[dict]
    argmin_sigma_sq: dict
    argmin_non_decreasing: bool

    def to_dict(self):
        return {"rows": self.rows, "argmin_sigma_sq_by_width": self.argmin_sigma_sq,
                "argmin_non_decreasing_in_width": self.argmin_non_decreasing}


def sweep_noise_variance(cfg, sigma_grid, widths=None, root=None, dataset=None, log=None):
    """One experiment per (width, sigma); table of mean test error.

    The lowest mean error of each width is marked ``best``.  Whether the
    best noise variance grows with width is reported, not enforced.
    """
    grid = [float(s) for s in sigma_grid]
    if not grid:
        raise ConfigError("sigma grid is empty")
    if any(not s >= 0 for s in grid):
        raise ConfigError("every sigma in the grid must satisfy σ ≥ 0")
    widths = [cfg.width] if not widths else [int(w) for w in widths]
    base = resolve_output_dir(cfg, root)
    ds = dataset if dataset is not None else load_dataset(cfg)
    rows = []
    for width in widths:
        for sigma in grid:
            point = cfg.replace(width=width, sigma=sigma, output_dir=str(base / "sweep" / f"w{width}_s{sigma!r}"))
            res = run_experiment(point, root, ds, log)
            err = res.summary["aggregate"]["eval_error"]
            rows.append({"width": width, "sigma": sigma, "sigma_sq": sigma * sigma,
                         "mean_error": err["mean"], "std_error": err["std"], "best": False})
    argmin = {}
    for width in widths:
        mine = [r for r in rows if r["width"] == width]
        best = min(mine, key=lambda r: (r["mean_error"], r["sigma"]))
        best["best"] = True
        argmin[str(width)] = best["sigma_sq"]
    ordered = [argmin[str(w)] for w in sorted(widths)]
    report = SweepReport(rows, argmin, all(a <= b for a, b in zip(ordered, ordered[1:])))

    base.mkdir(parents=True, exist_ok=True)
    with open(base / "sweep.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) if c != "best" else ("*" if r[c] else "") for c in SWEEP_COLUMNS) + "\n")
    with open(base / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
