"""Evaluation protocol: splits, repeated trials, error summaries, effective
sample size, and subgroup-restricted estimates."""

from __future__ import annotations

import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import dawid_skene, labeled_only, majority_vote, pseudo_label, ssme, ssme_marginal
from .data import UNLABELED, DatasetError, EvaluationDataset
from .metrics import DEFAULT_SAMPLES, MetricReport, MetricRequest, estimate_metrics, estimate_with_fixed_labels
from .mixture import FitConfig
from .seeding import derive_seed, rng_for

METHODS = ("ssme", "labeled", "pl", "ds", "mv", "ssme-m")
SPLIT_RETRIES = 100
ESS_SIZES = tuple(range(10, 1001, 5))


# ---------------------------------------------------------------------------
# Parallel execution


def resolve_threads(threads: int | None) -> int:
    """Explicit value, else ``SSME_THREADS``, else 1."""
    if threads is None:
        threads = int(os.environ.get("SSME_THREADS", "1") or 1)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def parallel_map(fn, jobs, threads: int | None = None) -> list:
    """``[fn(j) for j in jobs]``, optionally across worker processes.

    Results come back in job order. Every job derives its own seeds, so the
    output does not depend on the worker count.
    """
    jobs = list(jobs)
    threads = resolve_threads(threads)
    if threads == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs, chunksize=1))


# ---------------------------------------------------------------------------
# Splits


@dataclass
class Split:
    """Estimation split (labels hidden past ``n_labeled``), its hidden truth,
    and the disjoint evaluation remainder of the pool."""

    estimation: EvaluationDataset
    truth: np.ndarray
    evaluation: EvaluationDataset
    index: np.ndarray
    n_labeled: int


def _check_pool(pool: EvaluationDataset) -> None:
    if np.any(pool.labels == UNLABELED):
        raise DatasetError("pool must be fully labeled")
    missing = sorted(set(range(pool.n_classes)) - set(np.unique(pool.labels).tolist()))
    if missing:
        raise DatasetError(f"class absent from pool: {missing}")


def split_index(labels: np.ndarray, n_classes: int, n_labeled: int, n_total: int, seed: int) -> np.ndarray:
    """Pick ``n_total`` rows without replacement; the first ``n_labeled``
    cover every class (when ``n_labeled >= n_classes``)."""
    n = labels.size
    need = min(n_labeled, n_classes)
    idx = None
    for attempt in range(SPLIT_RETRIES):
        idx = rng_for(seed, attempt).permutation(n)[:n_total]
        if np.unique(labels[idx[:n_labeled]]).size >= need:
            return idx
    # Deterministic swap-in: for each missing class, move its first available
    # pool example into the labeled block, replacing a duplicate-class entry.
    idx = idx.copy()
    for k in range(n_classes):
        if len(np.unique(labels[idx[:n_labeled]])) >= need:
            break
        if np.any(labels[idx[:n_labeled]] == k):
            continue
        counts = np.bincount(labels[idx[:n_labeled]], minlength=n_classes)
        victim = next(p for p in range(n_labeled - 1, -1, -1) if counts[labels[idx[p]]] > 1)
        pos = np.flatnonzero(labels[idx] == k)
        if pos.size:
            later = pos[0]
            idx[victim], idx[later] = idx[later], idx[victim]
        else:
            outside = np.setdiff1d(np.flatnonzero(labels == k), idx)
            idx[victim] = outside[0]
    return idx


def make_split(pool: EvaluationDataset, n_labeled: int, n_unlabeled: int, seed: int) -> Split:
    """Sample an estimation split from a fully labeled pool.

    Raises
    ------
    DatasetError
        If the pool is too small for a disjoint evaluation remainder or a
        class is missing from it.
    """
    _check_pool(pool)
    if n_labeled < 1 or n_unlabeled < 0:
        raise ValueError("need n_labeled >= 1 and n_unlabeled >= 0")
    n_total = n_labeled + n_unlabeled
    if n_total >= len(pool):
        raise DatasetError(
            f"pool too small: {len(pool)} records for {n_total} estimation records plus a disjoint evaluation split"
        )
    idx = split_index(pool.labels, pool.n_classes, n_labeled, n_total, seed)
    est = pool.subset(idx)
    truth = est.labels.copy()
    hidden = truth.copy()
    hidden[n_labeled:] = UNLABELED
    rest = np.ones(len(pool), dtype=bool)
    rest[idx] = False
    return Split(est.with_labels(hidden), truth, pool.subset(rest), idx, n_labeled)


# ---------------------------------------------------------------------------
# Methods


def ground_truth(evaluation: EvaluationDataset, requests: list[MetricRequest]) -> dict[tuple[int, str], float]:
    """Metric values on a fully labeled evaluation split (undefined ones omitted)."""
    report = estimate_with_fixed_labels(evaluation, evaluation.labels, requests, samples=1, method="truth")
    return {key: est.value for key, est in report.estimates.items()}


def _fit_config(seed: int, fit_overrides: dict | None) -> FitConfig:
    return FitConfig(**{"seed": seed, **(fit_overrides or {})})


def run_method(
    method: str,
    dataset: EvaluationDataset,
    requests: list[MetricRequest],
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    fit_overrides: dict | None = None,
) -> MetricReport:
    """Dispatch one estimator by tag (see ``METHODS``)."""
    if method == "ssme":
        return ssme(dataset, requests, _fit_config(seed, fit_overrides), seed, samples)
    if method == "labeled":
        return labeled_only(dataset, requests)
    if method == "pl":
        return pseudo_label(dataset, requests)
    if method == "ds":
        return dawid_skene(dataset, requests, seed=seed, samples=samples)[1]
    if method == "mv":
        return majority_vote(dataset, requests)[1]
    if method == "ssme-m":
        merged = MetricReport(method="SSME-M", seed=seed, samples=samples)
        for j in sorted({r.classifier for r in requests}):
            part = ssme_marginal(dataset, j, requests, _fit_config(seed, fit_overrides), seed, samples)
            merged.estimates.update(part.estimates)
            merged.errors.update(part.errors)
            merged.config = part.config
        return merged
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


# ---------------------------------------------------------------------------
# Trials


@dataclass
class TrialResult:
    method: str
    metric: str
    classifier: int
    estimate: float
    truth: float
    abs_error: float
    seed: int
    run: int
    n_labeled: int
    n_unlabeled: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialSet:
    results: list[TrialResult] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def trial_seed(master_seed: int, run: int) -> int:
    return derive_seed(master_seed, run)


def run_single_trial(
    pool: EvaluationDataset,
    methods,
    n_labeled: int,
    n_unlabeled: int,
    requests: list[MetricRequest],
    master_seed: int,
    run: int,
    samples: int = DEFAULT_SAMPLES,
    fit_overrides: dict | None = None,
    split_seed: int | None = None,
) -> TrialSet:
    """One run of the protocol; a pure function of its arguments."""
    seed = trial_seed(master_seed, run)
    split = make_split(pool, n_labeled, n_unlabeled, seed if split_seed is None else split_seed)
    truth = ground_truth(split.evaluation, requests)
    out = TrialSet()
    for method in methods:
        base = {"method": method, "seed": seed, "run": run}
        try:
            report = run_method(method, split.estimation, requests, derive_seed(seed, 1), samples, fit_overrides)
        except Exception as exc:  # recorded, run continues
            out.failures.append({**base, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        for req in requests:
            key = (req.classifier, req.name)
            if key in report.errors or key not in truth:
                reason = report.errors.get(key, "metric undefined on evaluation split")
                out.failures.append({**base, "metric": req.name, "classifier": req.classifier, "reason": reason})
                continue
            est = report.estimates[key].value
            out.results.append(
                TrialResult(method, req.name, req.classifier, est, truth[key], abs(est - truth[key]), seed, run, n_labeled, n_unlabeled)
            )
    return out


def _trial_job(args) -> TrialSet:
    return run_single_trial(*args)


def run_trials(
    pool: EvaluationDataset,
    methods,
    n_labeled: int,
    n_unlabeled: int,
    requests: list[MetricRequest],
    runs: int = 50,
    master_seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    fit_overrides: dict | None = None,
    threads: int | None = None,
) -> TrialSet:
    """Repeat the split/estimate/score protocol ``runs`` times.

    Run ``r`` uses seed ``derive_seed(master_seed, r)``, so any single run can
    be reproduced in isolation with :func:`run_single_trial`.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    if n_labeled + n_unlabeled >= len(pool):
        raise DatasetError("estimation and evaluation splits must be disjoint: pool too small")
    jobs = [
        (pool, tuple(methods), n_labeled, n_unlabeled, requests, master_seed, r, samples, fit_overrides)
        for r in range(runs)
    ]
    total = TrialSet()
    for part in parallel_map(_trial_job, jobs, threads):
        total.results.extend(part.results)
        total.failures.extend(part.failures)
    return total


# ---------------------------------------------------------------------------
# Error summaries


def mae(errors) -> float:
    """Mean absolute error from TrialResults or raw absolute errors."""
    vals = [r.abs_error if isinstance(r, TrialResult) else float(r) for r in errors]
    if not vals:
        raise ValueError("mae of an empty result set")
    return float(np.mean(vals))


def _keyed(results) -> dict:
    return {(r.seed, r.metric, r.classifier): r.abs_error for r in results}


def rescaled_mae(method_results, labeled_results) -> float:
    """MAE of a method over MAE of the labeled baseline on matched trials.

    Only (seed, metric, classifier) keys present in both sets count, so a
    trial that failed for either side is excluded from both.
    """
    a, b = _keyed(method_results), _keyed(labeled_results)
    common = sorted(set(a) & set(b))
    if not common:
        raise ValueError("no matched trials between method and labeled baseline")
    num = float(np.mean([a[k] for k in common]))
    den = float(np.mean([b[k] for k in common]))
    if den == 0.0:
        raise ZeroDivisionError("degenerate rescaling: labeled-only MAE is 0")
    return num / den


def confidence_interval(values) -> tuple[float, float]:
    """``(mean, 1.96 * sd / sqrt(n))`` with the sample (n - 1) sd."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("confidence interval needs at least two values")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def per_run_errors(results) -> dict[int, float]:
    """Mean absolute error per run (averaged over classifiers)."""
    by = defaultdict(list)
    for r in results:
        by[r.run].append(r.abs_error)
    return {run: float(np.mean(v)) for run, v in sorted(by.items())}


def summarize_trials(trials: TrialSet, baseline: str = "labeled") -> list[dict]:
    """Per (method, metric): mae, CI over runs, and RMAE against ``baseline``."""
    groups = defaultdict(list)
    for r in trials.results:
        groups[(r.method, r.metric)].append(r)
    rows = []
    for (method, metric), res in sorted(groups.items()):
        row = {"method": method, "metric": metric, "mae": mae(res), "n_results": len(res)}
        runs = list(per_run_errors(res).values())
        if len(runs) >= 2:
            row["ci_mean"], row["ci_half_width"] = confidence_interval(runs)
        base = groups.get((baseline, metric))
        if base is not None:
            try:
                row["rmae"] = rescaled_mae(res, base)
            except (ValueError, ZeroDivisionError) as exc:
                row["rmae_error"] = str(exc)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Effective sample size


@dataclass
class EssCurve:
    sizes: np.ndarray
    mae: np.ndarray
    runs: int
    truncated: bool = False

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.mae = np.asarray(self.mae, dtype=float)
        if self.sizes.size == 0 or self.sizes.shape != self.mae.shape:
            raise ValueError("curve needs matching, nonempty sizes and errors")
        if np.any(np.diff(self.sizes) <= 0):
            raise ValueError("curve sizes must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes.tolist(),
            "mae": self.mae.tolist(),
            "runs": self.runs,
            "truncated": self.truncated,
        }


def effective_sample_size(method_mae: float, curve: EssCurve) -> int:
    """Curve size whose labeled-only MAE is closest to ``method_mae``.

    Ties go to the larger size; an error below the whole curve maps to the
    largest size.
    """
    if method_mae < curve.mae.min():
        return int(curve.sizes[-1])
    gap = np.abs(curve.mae - method_mae)
    best = np.flatnonzero(gap == gap.min())
    return int(curve.sizes[best[-1]])


@dataclass
class EssPool:
    """A pool split once into a fixed evaluation reserve and a draw pool."""

    draw: EvaluationDataset
    truth: dict[tuple[int, str], float]
    reserve_size: int


def ess_pool(pool: EvaluationDataset, requests: list[MetricRequest], reserve: int, seed: int) -> EssPool:
    _check_pool(pool)
    if not 0 < reserve < len(pool):
        raise DatasetError("evaluation reserve must leave records to draw from")
    order = rng_for(seed, 0).permutation(len(pool))
    evaluation = pool.subset(np.sort(order[:reserve]))
    draw = pool.subset(np.sort(order[reserve:]))
    return EssPool(draw, ground_truth(evaluation, requests), reserve)


def _labeled_errors(draw: EvaluationDataset, truth: dict, requests, n_labeled: int, seed: int) -> float:
    idx = split_index(draw.labels, draw.n_classes, n_labeled, n_labeled, seed)
    report = labeled_only(draw.subset(idx), requests)
    errs = [abs(report.estimates[k].value - truth[k]) for k in truth if k in report.estimates]
    return float(np.mean(errs)) if errs else float("nan")


def _curve_job(args) -> float:
    draw, truth, requests, size, runs, seed = args
    vals = [_labeled_errors(draw, truth, requests, size, derive_seed(seed, size, r)) for r in range(runs)]
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def ess_curve(
    ep: EssPool,
    requests: list[MetricRequest],
    runs: int = 50,
    seed: int = 0,
    sizes=ESS_SIZES,
    threads: int | None = None,
) -> EssCurve:
    """Labeled-only MAE per labeled size, averaged over ``runs`` draws.

    Sizes larger than the draw pool are dropped and the curve is flagged as
    truncated. The draw at (size, run) uses seed ``derive_seed(seed, size, run)``.
    """
    sizes = [s for s in sizes if s <= len(ep.draw)]
    truncated = len(sizes) < len(ESS_SIZES) or sizes[-1] < ESS_SIZES[-1]
    if not sizes:
        raise DatasetError("draw pool smaller than the smallest curve size")
    jobs = [(ep.draw, ep.truth, requests, s, runs, seed) for s in sizes]
    values = parallel_map(_curve_job, jobs, threads)
    keep = [i for i, v in enumerate(values) if math.isfinite(v)]
    return EssCurve(np.array(sizes)[keep], np.array(values)[keep], runs, truncated)


def method_error_for_ess(
    ep: EssPool,
    method: str,
    requests: list[MetricRequest],
    n_labeled: int,
    n_unlabeled: int,
    runs: int = 50,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    fit_overrides: dict | None = None,
) -> float:
    """Mean absolute error of ``method`` against the reserve, using the same
    per-run split seeds as the curve uses at ``n_labeled``."""
    errs = []
    for r in range(runs):
        s = derive_seed(seed, n_labeled, r)
        idx = split_index(ep.draw.labels, ep.draw.n_classes, n_labeled, n_labeled + n_unlabeled, s)
        est = ep.draw.subset(idx)
        hidden = est.labels.copy()
        hidden[n_labeled:] = UNLABELED
        report = run_method(method, est.with_labels(hidden), requests, derive_seed(s, 1), samples, fit_overrides)
        errs.extend(abs(report.estimates[k].value - ep.truth[k]) for k in ep.truth if k in report.estimates)
    if not errs:
        raise ValueError("method produced no estimable metrics")
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# Subgroups


def subgroup_estimates(
    model,
    dataset: EvaluationDataset,
    group: str,
    requests: list[MetricRequest],
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
) -> MetricReport:
    """Sampler restricted to records tagged ``group``; the posterior still
    comes from the model fitted on the whole split."""
    mask = dataset.group_mask(group)
    if not mask.any():
        raise DatasetError(f"empty group: no records tagged {group!r}")
    report = estimate_metrics(model, dataset, requests, seed=seed, samples=samples, scope=mask)
    report.flags["group"] = group
    report.flags["n_members"] = int(mask.sum())
    return report
