"""Command-line interface: ``fit``, ``estimate``, ``synth`` and ``ess``.

Exit codes: 0 success, 2 input or validation error, 3 fit failure,
4 the only requested metric could not be estimated.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import labeled_only
from .data import DatasetError, load_dataset, validate_dataset
from .harness import (
    ESS_SIZES,
    METHODS,
    effective_sample_size,
    ess_curve,
    ess_pool,
    method_error_for_ess,
    run_method,
    subgroup_estimates,
)
from .metrics import DEFAULT_SAMPLES, MetricKind, estimate_metrics, requests_for
from .mixture import FitConfig, FitError, FittedMixture, fit
from .synthetic import BoundInputs, GridSpec, epsilon_bound, run_grid, summarize_grid

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FIT = 3
EXIT_UNESTIMABLE = 4
DEFAULT_ESS_RESERVE = 1000


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, no timestamps, non-finite floats as null."""
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv_list(cast):
    def parse(text: str):
        try:
            return tuple(cast(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _load(path: str, fmt: str | None):
    if not Path(path).is_file():
        raise CliError(f"input not found: {path}")
    try:
        ds = load_dataset(path, fmt)
    except (DatasetError, ValueError, OSError) as exc:
        raise CliError(f"invalid dataset {path}: {exc}") from exc
    report = validate_dataset(ds)
    if not report.ok:
        raise CliError(f"dataset failed validation: {'; '.join(report.failures)}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return ds


def _fit_config(args) -> FitConfig:
    try:
        return FitConfig(
            lambda_u=args.lambda_u,
            max_epochs=args.max_epochs,
            tol=args.tol,
            seed=args.seed,
            loo=not args.no_loo,
            eps_prior=args.eps_prior,
            bandwidth_method=args.bandwidth_method,
            bandwidth=args.bandwidth,
            bandwidth_scale=args.bandwidth_scale,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _fit_overrides(cfg: FitConfig) -> dict:
    d = cfg.to_dict()
    d.pop("seed")
    return d


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("mixture fit")
    g.add_argument("--lambda-u", type=float, default=1.0, help="weight of unlabeled records")
    g.add_argument("--max-epochs", type=int, default=1000)
    g.add_argument("--tol", type=float, default=1e-6, help="stop when no responsibility moves more than this")
    g.add_argument("--no-loo", action="store_true", help="keep each point's own kernel during EM")
    g.add_argument("--eps-prior", type=float, default=1e-6)
    g.add_argument("--bandwidth-method", choices=("isj", "silverman", "fixed"), default="isj")
    g.add_argument("--bandwidth", type=float, default=None, help="value for --bandwidth-method fixed")
    g.add_argument("--bandwidth-scale", type=float, default=1.0, help="multiplier on the selected bandwidths")


def _add_metric_flags(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--metrics", type=_csv_list(str), default=tuple(default.split(",")))
    p.add_argument("--bins", type=int, default=10, help="ECE bin count")
    p.add_argument("--threshold", type=float, default=0.5, help="binary accuracy threshold")


def _requests(args, n_classifiers: int, n_classes: int):
    try:
        reqs = requests_for(args.metrics, n_classifiers, bin_count=args.bins, threshold=args.threshold)
        for r in reqs:
            r.check(n_classifiers, n_classes)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return reqs


# ---------------------------------------------------------------------------
# Commands


def cmd_fit(args) -> int:
    ds = _load(args.input, args.format)
    cfg = _fit_config(args)
    try:
        model = fit(ds, cfg)
    except FitError as exc:
        raise CliError(f"fit failed: {exc}", EXIT_FIT) from exc
    Path(args.out).write_text(dumps(model.to_dict()), encoding="utf-8")
    log = {
        "command": "fit",
        "input": args.input,
        "model": args.out,
        "config": cfg.to_dict(),
        "epochs": model.epochs,
        "converged": model.converged,
        "max_change": model.max_change,
        "priors": model.priors,
        "bandwidth": {"values": model.bandwidth.h, "methods": list(model.bandwidth.methods)},
        "rebuilt_classes": list(model.rebuilt_classes),
    }
    _emit(dumps(log), args.log)
    return EXIT_OK


def cmd_estimate(args) -> int:
    ds = _load(args.dataset, args.format)
    reqs = _requests(args, ds.n_classifiers, ds.n_classes)
    for m in args.methods:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if args.samples < 1:
        raise CliError("--samples must be >= 1")
    cfg = _fit_config(args)
    model = None
    if args.model:
        try:
            model = FittedMixture.load(args.model)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(f"cannot read model {args.model}: {exc}") from exc
        if (model.n_classifiers, model.n_classes) != (ds.n_classifiers, ds.n_classes):
            raise CliError("model and dataset disagree on classifier or class count")
        cfg = model.config

    reports = []
    for method in args.methods:
        try:
            if args.subgroup is not None:
                if method == "ssme":
                    mdl = model if model is not None else fit(ds, cfg)
                    rep = subgroup_estimates(mdl, ds, args.subgroup, reqs, args.seed, args.samples)
                elif method == "labeled":
                    if not ds.group_mask(args.subgroup).any():
                        raise DatasetError(f"empty group: no records tagged {args.subgroup!r}")
                    rep = labeled_only(ds, reqs, group=args.subgroup)
                else:
                    raise CliError(f"--subgroup supports methods ssme and labeled, not {method}")
            elif method == "ssme" and model is not None:
                rep = estimate_metrics(model, ds, reqs, seed=args.seed, samples=args.samples)
            else:
                rep = run_method(method, ds, reqs, args.seed, args.samples, _fit_overrides(cfg))
        except FitError as exc:
            raise CliError(f"fit failed ({method}): {exc}", EXIT_FIT) from exc
        except DatasetError as exc:
            raise CliError(str(exc)) from exc
        except ValueError as exc:
            raise CliError(f"{method}: {exc}") from exc
        reports.append(rep.to_dict())

    doc = {
        "command": "estimate",
        "version": __version__,
        "dataset": args.dataset,
        "model": args.model,
        "seed": args.seed,
        "samples": args.samples,
        "subgroup": args.subgroup,
        "methods": list(args.methods),
        "metrics": [MetricKind(m).value for m in args.metrics],
        "bins": args.bins,
        "threshold": args.threshold,
        "fit_config": cfg.to_dict(),
        "n_records": len(ds),
        "n_labeled": ds.n_labeled,
        "reports": reports,
    }
    _emit(dumps(doc), args.out)
    if len(args.metrics) == 1 and any(r["errors"] and not r["estimates"] for r in reports):
        print("error: the requested metric could not be estimated", file=sys.stderr)
        return EXIT_UNESTIMABLE
    return EXIT_OK


def _bound_only(args) -> int:
    if len(args.nu) != 1:
        raise CliError("--bound-only takes a single --nu value")
    needed = {"--d": args.d, "--norm": args.norm}
    missing = [k for k, v in needed.items() if v is None]
    if missing:
        raise CliError(f"--bound-only needs {', '.join(missing)}")
    try:
        res = epsilon_bound(BoundInputs(args.nu[0], args.nl, args.d, args.norm, args.p, args.c0))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    doc = {
        "command": "synth-bound",
        "inputs": {"n_unlabeled": args.nu[0], "n_labeled": args.nl, "d": args.d, "norm_c": args.norm, "p": args.p, "c0": args.c0},
        "eps_c": res.value,
        "first_term": res.first_term,
        "second_term": res.second_term,
        "assumptions_met": res.assumptions_met,
        "tag": res.tag,
    }
    _emit(dumps(doc), args.summary)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.bound_only:
        return _bound_only(args)
    try:
        grid = GridSpec(
            norms=args.norms,
            dims=args.dims,
            n_unlabeled=args.nu,
            n_labeled=args.nl,
            runs=args.runs,
            n_eval=args.n_eval,
            metrics=tuple(MetricKind(m).value for m in args.metrics),
            samples=args.samples,
        )
        grid.validate()
        if grid.n_eval < 1000:
            raise ValueError("--n-eval must be >= 1000")
        for m in args.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
    except ValueError as exc:
        raise CliError(f"invalid grid: {exc}") from exc
    if not args.out:
        raise CliError("synth needs --out for the results CSV")
    result = run_grid(grid, args.methods, args.seed, args.threads, fit_overrides=_fit_overrides(_fit_config(args)))

    buf = io.StringIO()
    cols = ["norm", "d", "n_unlabeled", "n_labeled", "rep", "seed", "method", "metric", "mae"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in result.rows:
        writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in cols})
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")

    summary = summarize_grid(result)
    summary.update(
        {
            "command": "synth",
            "seed": args.seed,
            "grid": {
                "norms": list(grid.norms),
                "dims": list(grid.dims),
                "n_unlabeled": list(grid.n_unlabeled),
                "n_labeled": grid.n_labeled,
                "runs": grid.runs,
                "n_eval": grid.n_eval,
                "metrics": list(grid.metrics),
                "samples": grid.samples,
            },
            "methods": list(args.methods),
            "fit_config": _fit_overrides(_fit_config(args)),
            "failures": result.failures,
            "results_csv": args.out,
        }
    )
    _emit(dumps(summary), args.summary)
    return EXIT_OK


def cmd_ess(args) -> int:
    ds = _load(args.dataset, args.format)
    reqs = _requests(args, ds.n_classifiers, ds.n_classes)
    if args.method not in METHODS:
        raise CliError(f"unknown method {args.method!r}")
    need = ESS_SIZES[-1] + args.reserve
    truncated = len(ds) < need
    if truncated and not args.allow_truncated:
        raise CliError(
            f"pool of {len(ds)} records is smaller than {need} (largest curve size plus evaluation reserve); "
            "pass --allow-truncated to shorten the curve"
        )
    if truncated:
        print("warning: ESS curve truncated to the available pool", file=sys.stderr)
    cfg = _fit_config(args)
    try:
        ep = ess_pool(ds, reqs, args.reserve, args.seed)
        if args.nl + args.nu > len(ep.draw):
            raise DatasetError("draw pool too small for --nl + --nu")
        curve = ess_curve(ep, reqs, args.runs, args.seed, threads=args.threads)
        err = method_error_for_ess(ep, args.method, reqs, args.nl, args.nu, args.runs, args.seed, args.samples, _fit_overrides(cfg))
    except FitError as exc:
        raise CliError(f"fit failed: {exc}", EXIT_FIT) from exc
    except (DatasetError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    doc = {
        "command": "ess",
        "dataset": args.dataset,
        "method": args.method,
        "metrics": [MetricKind(m).value for m in args.metrics],
        "seed": args.seed,
        "runs": args.runs,
        "samples": args.samples,
        "n_labeled": args.nl,
        "n_unlabeled": args.nu,
        "reserve": args.reserve,
        "fit_config": cfg.to_dict(),
        "method_mae": err,
        "ess": effective_sample_size(err, curve),
        "truncated": curve.truncated,
        "curve": curve.to_dict(),
    }
    _emit(dumps(doc), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssme", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the semi-supervised mixture and save it")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default=None)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--log", default=None, help="fit log path (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", help="estimate metrics with one or more methods")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default=None)
    p.add_argument("--model", default=None, help="previously fitted model (used by ssme)")
    p.add_argument("--methods", type=_csv_list(str), default=("ssme",))
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--subgroup", default=None, help="restrict scoring to records with this group tag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_metric_flags(p, "acc,ece,auc,auprc")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth", help="synthetic grid experiments and error bounds")
    p.add_argument("--norms", type=_csv_list(float), default=(1.5,))
    p.add_argument("--dims", type=_csv_list(int), default=(4,))
    p.add_argument("--nu", type=_csv_list(int), default=(1000,))
    p.add_argument("--nl", type=int, default=20)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--n-eval", type=int, default=5000)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--methods", type=_csv_list(str), default=("labeled", "ssme"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: SSME_THREADS or 1)")
    p.add_argument("--out", default=None, help="long-format results CSV")
    p.add_argument("--summary", default=None, help="JSON summary path (default stdout)")
    p.add_argument("--bound-only", action="store_true", help="only evaluate the separation error bound")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--norm", type=float, default=None)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--c0", type=float, default=1.0)
    _add_metric_flags(p, "acc,ece,auc,auprc")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ess", help="effective labeled sample size of a method")
    p.add_argument("--dataset", required=True, help="fully labeled pool")
    p.add_argument("--format", choices=("jsonl", "csv"), default=None)
    p.add_argument("--method", default="ssme")
    p.add_argument("--nl", type=int, default=20)
    p.add_argument("--nu", type=int, default=1000)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--reserve", type=int, default=DEFAULT_ESS_RESERVE, help="records held out for ground truth")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--allow-truncated", action="store_true")
    p.add_argument("--out", default=None)
    _add_metric_flags(p, "acc")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_ess)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
