"""Command-line driver.

    ncmn run <config>
    ncmn sweep <config> --sigma-grid 0,0.1,0.2 [--widths 1,2,4]
    ncmn gradcheck [--instantiations 5] [--case NAME ...]
    ncmn diagnose <config> --model <checkpoint>

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
divergence (including failed gradient checks).  ``NCMN_OUTPUT_ROOT``
overrides the directory that relative ``output_dir`` values live under.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .errors import ConfigError, DataError, DivergenceError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("ncmn")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _cmd_run(args):
    from .config import load_config
    from .experiment import run_experiment

    cfg = load_config(args.config)
    res = run_experiment(cfg, log=log.info)
    agg = res.summary["aggregate"]
    acc = agg["eval_acc"]
    line = f"eval acc {acc['mean']:.4f} ± {acc['std']:.4f} over {len(cfg.seeds)} seed(s)"
    if "mean_abs_corr" in agg:
        line += f"; mean |corr| {agg['mean_abs_corr']['mean']:.4f}"
    print(line)
    print(f"reports written to {res.output_dir}")
    return EXIT_OK


def _cmd_sweep(args):
    from .config import load_config
    from .experiment import resolve_output_dir, sweep_noise_variance

    cfg = load_config(args.config)
    rep = sweep_noise_variance(cfg, args.sigma_grid, args.widths, log=log.info)
    print("width  sigma^2    mean_error  best")
    for r in rep.rows:
        print(f"{r['width']:>5}  {r['sigma_sq']:<9.5g}  {r['mean_error']:.4f}      {'*' if r['best'] else ''}")
    print(f"argmin sigma^2 non-decreasing in width: {rep.argmin_non_decreasing}")
    print(f"reports written to {resolve_output_dir(cfg)}")
    return EXIT_OK


def _cmd_gradcheck(args):
    from .gradsuite import CASES, run_suite

    unknown = [c for c in args.case or [] if c not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradient case(s): {', '.join(unknown)}")
    results = run_suite(args.case, args.instantiations, args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} {status:<4}  max rel err {r.max_rel_error:.2e}  truncated coords {r.truncated}")
    if not all(r.passed for r in results):
        raise NumericError("gradient check failed")
    return EXIT_OK


def _cmd_diagnose(args):
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .diagnostics import correlation_report
    from .experiment import load_dataset
    from .training import evaluate

    cfg = load_config(args.config)
    model = load_checkpoint(args.model)
    ds = load_dataset(cfg)
    if tuple(ds.input_shape) != model.input_shape:
        raise DataError(f"checkpoint expects inputs {model.input_shape}, dataset has {tuple(ds.input_shape)}")
    loss, acc = evaluate(model, ds.x_test, ds.y_test)
    report = {"eval_loss": loss, "eval_acc": acc, "correlation": correlation_report(model, ds.x_test).to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ncmn", description="Multiplicative-noise experiments and diagnostics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of a config and write reports")
    run.add_argument("config")
    run.set_defaults(func=_cmd_run)

    sweep = sub.add_parser("sweep", help="noise-variance sweep over sigma (and width)")
    sweep.add_argument("config")
    sweep.add_argument("--sigma-grid", type=_floats, required=True, help="comma-separated sigma values")
    sweep.add_argument("--widths", type=_ints, default=None, help="comma-separated width multipliers")
    sweep.set_defaults(func=_cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and noise layer")
    gc.add_argument("--instantiations", type=int, default=5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--case", action="append", help="restrict to a named case (repeatable)")
    gc.set_defaults(func=_cmd_gradcheck)

    diag = sub.add_parser("diagnose", help="feature-correlation report of a saved model")
    diag.add_argument("config")
    diag.add_argument("--model", required=True, help="checkpoint written by 'run'")
    diag.add_argument("--output", help="also write the JSON report here")
    diag.set_defaults(func=_cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
