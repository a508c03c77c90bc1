"""Gaussian score model, error-bound calculator, and synthetic experiment grids.

Scores follow a balanced two-component model: negatives ``s ~ N(0, I_d)``,
positives ``s ~ N(c, I_d)``. Dimension ``k`` is classifier ``k``'s logit for
the positive class, so its probability row is ``[1 - sigmoid(s_k),
sigmoid(s_k)]``. (Its ALR image is ``-s_k`` because the last class is the ALR
reference; the reflection leaves every density and metric unchanged.)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.special import expit, ndtr

from .data import UNLABELED, EvaluationDataset
from .seeding import derive_seed, rng_for

PAPER_GRID = {
    "norms": (0.75, 1.0, 1.25, 1.5),
    "dims": (2, 4, 6, 8, 10),
    "n_unlabeled": (50, 100, 250, 500, 1000, 2000),
    "n_labeled": 20,
    "runs": 50,
}
MIN_ENTRY = 0.01


def normal_cdf(x):
    """Standard normal CDF (``scipy.special.ndtr``)."""
    return ndtr(x)


def sample_separation(d: int, target_norm: float, mean_entry: float | None = None, seed: int = 0) -> np.ndarray:
    """Draw entries from N(mean_entry, 0.2), floor at 0.01, rescale to ``target_norm``.

    ``mean_entry`` defaults to ``target_norm / sqrt(d)`` so the draw is centred
    on a vector of equal entries with the requested norm.
    """
    if d < 1 or not target_norm > 0:
        raise ValueError("need d >= 1 and target_norm > 0")
    if mean_entry is None:
        mean_entry = target_norm / math.sqrt(d)
    c = np.maximum(np.random.default_rng(seed).normal(mean_entry, 0.2, size=d), MIN_ENTRY)
    return c * (target_norm / np.linalg.norm(c))


@dataclass(frozen=True)
class SyntheticSpec:
    c: tuple[float, ...]
    n_labeled: int = 20
    n_unlabeled: int = 1000
    n_eval: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        if self.n_labeled < 2:
            raise ValueError("need at least two labeled examples (one per class)")
        if self.n_eval < 1000:
            raise ValueError("n_eval must be >= 1000")

    @property
    def d(self) -> int:
        return len(self.c)


@dataclass(frozen=True)
class SyntheticDraw:
    estimation: EvaluationDataset
    evaluation: EvaluationDataset
    estimation_truth: np.ndarray
    c: np.ndarray


def _profiles(scores: np.ndarray) -> np.ndarray:
    p = expit(scores)
    return np.stack([1.0 - p, p], axis=2)


def generate(spec: SyntheticSpec) -> SyntheticDraw:
    """Estimation split (``n_labeled`` labeled + ``n_unlabeled`` hidden) and a
    fully labeled evaluation split, both from the Gaussian score model."""
    c = np.asarray(spec.c, dtype=float)
    rng = rng_for(spec.seed, 0)
    n_est = spec.n_labeled + spec.n_unlabeled
    y = rng.integers(0, 2, size=n_est + spec.n_eval)
    lab = y[: spec.n_labeled]
    for k in (0, 1):
        if not np.any(lab == k):
            # Deterministic repair: flip the first labeled slot not needed by the other class.
            y[0 if k == 1 else spec.n_labeled - 1] = k
            lab = y[: spec.n_labeled]
    s = rng.standard_normal((y.size, c.size)) + y[:, None] * c[None, :]
    prof = _profiles(s)
    truth = y[:n_est].copy()
    est_labels = truth.copy()
    est_labels[spec.n_labeled :] = UNLABELED
    ids = [f"e{i}" for i in range(n_est)]
    estimation = EvaluationDataset(prof[:n_est], est_labels, ids)
    evaluation = EvaluationDataset(prof[n_est:], y[n_est:], [f"v{i}" for i in range(spec.n_eval)])
    return SyntheticDraw(estimation, evaluation, truth, c)


# ---------------------------------------------------------------------------
# Closed-form quantities


def theoretical_auc(c_k: float) -> float:
    """AUC of the optimal linear rule at separation ``c_k``: Phi(c_k / sqrt 2)."""
    return float(ndtr(c_k / math.sqrt(2.0)))


def theoretical_acc(c_k: float) -> float:
    """Accuracy of the optimal linear rule at separation ``c_k``: Phi(c_k / 2)."""
    return float(ndtr(c_k / 2.0))


@dataclass(frozen=True)
class BoundInputs:
    n_unlabeled: int
    n_labeled: int
    d: int
    norm_c: float
    p: float = 0.1
    c0: float = 1.0

    def assumptions_met(self) -> bool:
        """Sample-size gate of the bound, with the hidden constant set to 1."""
        c, n_u, d = self.norm_c, self.n_unlabeled, self.d
        if d < 2 or c <= 0:
            return False
        need = max(
            d,
            d / c**4,
            math.log(n_u) / min(c**2, c**4),
            d * math.log(d * n_u) / c**6,
        )
        return n_u >= need


@dataclass(frozen=True)
class BoundResult:
    value: float
    assumptions_met: bool
    first_term: float
    second_term: float

    @property
    def tag(self) -> str:
        return "ok" if self.assumptions_met else "assumptions-unmet"


def epsilon_bound(b: BoundInputs) -> BoundResult:
    """High-probability bound on the error of the estimated separation vector.

    ``(1/p) * (sqrt(d / (|c|^2 n_u))
               + |c| exp(-n_l |c|^2 (1 - C0/|c|^2 sqrt(d log n_u / (|c|^2 n_u)))^2 / 2))``
    """
    c = b.norm_c
    if c == 0:
        raise ValueError("zero separation: bound undefined")
    if not 0 < b.p < 1:
        raise ValueError("p must lie in (0, 1)")
    first = math.sqrt(b.d / (c**2 * b.n_unlabeled))
    inner = 1.0 - (b.c0 / c**2) * math.sqrt(b.d * math.log(b.n_unlabeled) / (c**2 * b.n_unlabeled))
    second = c * math.exp(-0.5 * b.n_labeled * c**2 * inner**2)
    return BoundResult((first + second) / b.p, b.assumptions_met(), first / b.p, second / b.p)


def performance_error_band(c_k: float, eps_c: float, metric: str = "auc") -> float:
    """``Phi(c_k / s) - Phi((c_k - eps_c) / s)``, ``s = sqrt 2`` (AUC) or 2 (accuracy)."""
    if c_k < 0 or eps_c < 0:
        raise ValueError("c_k and eps_c must be nonnegative")
    scale = {"auc": math.sqrt(2.0), "acc": 2.0}[metric]
    return float(ndtr(c_k / scale) - ndtr((c_k - eps_c) / scale))


def classifier_gain_condition(current_norm: float, d: int, delta: float) -> bool:
    """Whether adding a classifier with separation ``delta`` lifts the norm past sqrt(d + 1)."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return current_norm**2 + delta**2 > d + 1


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class GridSpec:
    norms: tuple[float, ...] = PAPER_GRID["norms"]
    dims: tuple[int, ...] = PAPER_GRID["dims"]
    n_unlabeled: tuple[int, ...] = PAPER_GRID["n_unlabeled"]
    n_labeled: int = 20
    runs: int = 50
    n_eval: int = 5000
    metrics: tuple[str, ...] = ("acc", "ece", "auc", "auprc")
    samples: int = 500

    def cells(self) -> list[tuple[float, int, int]]:
        return list(product(self.norms, self.dims, self.n_unlabeled))

    def validate(self) -> None:
        if not self.norms or not self.dims or not self.n_unlabeled:
            raise ValueError("grid needs at least one norm, dimension and unlabeled count")
        if any(v <= 0 for v in self.norms):
            raise ValueError("norms must be positive")
        if any(v < 1 for v in self.dims):
            raise ValueError("dims must be >= 1")
        if any(v < 0 for v in self.n_unlabeled):
            raise ValueError("unlabeled counts must be >= 0")
        if self.runs < 1 or self.n_labeled < 2:
            raise ValueError("need runs >= 1 and n_labeled >= 2")


@dataclass
class GridResult:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    coverage: list[dict] = field(default_factory=list)


def _run_cell_rep(args) -> tuple[list[dict], list[dict], dict | None]:
    from .harness import ground_truth, run_method

    grid, methods, seed, cell_index, rep, (norm, d, n_u), fit_overrides = args
    rep_seed = derive_seed(seed, cell_index, rep)
    c = sample_separation(d, norm, seed=derive_seed(rep_seed, 1))
    draw = generate(SyntheticSpec(tuple(c), grid.n_labeled, n_u, grid.n_eval, derive_seed(rep_seed, 2)))
    from .metrics import requests_for

    requests = requests_for(grid.metrics, d)
    truth = ground_truth(draw.evaluation, requests)
    base = {"norm": norm, "d": d, "n_unlabeled": n_u, "n_labeled": grid.n_labeled, "rep": rep, "seed": rep_seed}
    rows, failures, cover = [], [], None
    for method in methods:
        try:
            report = run_method(method, draw.estimation, requests, derive_seed(rep_seed, 3), grid.samples, fit_overrides)
        except Exception as exc:  # recorded, not fatal
            failures.append({**base, "method": method, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        for metric in grid.metrics:
            errs = []
            for j in range(d):
                key = (j, metric)
                if key in report.errors or key not in truth:
                    continue
                errs.append(abs(report.estimates[key].value - truth[key]))
            if len(errs) < d:
                failures.append({**base, "method": method, "metric": metric, "reason": "metric undefined"})
                continue
            rows.append({**base, "method": method, "metric": metric, "mae": float(np.mean(errs))})
            if method == "ssme" and metric == "auc" and d >= 2:
                eps = epsilon_bound(BoundInputs(max(n_u, 2), grid.n_labeled, d, norm)).value
                inside = [
                    abs(report.estimates[(j, "auc")].value - truth[(j, "auc")])
                    <= performance_error_band(c[j], eps, "auc")
                    for j in range(d)
                ]
                cover = {**base, "eps_c": eps, "covered_fraction": float(np.mean(inside))}
    return rows, failures, cover


def run_grid(grid: GridSpec, methods=("labeled", "ssme"), seed: int = 0, threads: int = 1, fit_overrides=None) -> GridResult:
    """Run every (cell, repetition) of ``grid`` for each method.

    Emits one long-format row per (cell, repetition, method, metric) holding
    the mean absolute error over classifiers against the evaluation split.
    Seeds depend only on ``(seed, cell index, repetition)``.
    """
    grid.validate()
    jobs = [
        (grid, tuple(methods), seed, ci, rep, cell, fit_overrides)
        for ci, cell in enumerate(grid.cells())
        for rep in range(grid.runs)
    ]
    from .harness import parallel_map

    result = GridResult()
    for rows, failures, cover in parallel_map(_run_cell_rep, jobs, threads):
        result.rows.extend(rows)
        result.failures.extend(failures)
        if cover is not None:
            result.coverage.append(cover)
    return result


def summarize_grid(result: GridResult) -> dict:
    """Trend checks (mean MAE at the smallest vs largest unlabeled count) and
    bound-coverage diagnostics per cell."""
    from collections import defaultdict

    by = defaultdict(list)
    for r in result.rows:
        by[(r["norm"], r["d"], r["method"], r["metric"], r["n_unlabeled"])].append(r["mae"])
    groups = defaultdict(dict)
    for (norm, d, method, metric, n_u), v in by.items():
        groups[(norm, d, method, metric)][n_u] = float(np.mean(v))
    trends = []
    for (norm, d, method, metric), curve in sorted(groups.items()):
        lo, hi = min(curve), max(curve)
        trends.append(
            {
                "norm": norm,
                "d": d,
                "method": method,
                "metric": metric,
                "mean_mae_by_n_unlabeled": {str(k): curve[k] for k in sorted(curve)},
                "decreases_with_unlabeled": bool(curve[hi] < curve[lo]) if hi != lo else None,
            }
        )
    cov = defaultdict(list)
    for c in result.coverage:
        cov[(c["norm"], c["d"], c["n_unlabeled"])].append(c)
    coverage = [
        {
            "norm": k[0],
            "d": k[1],
            "n_unlabeled": k[2],
            "eps_c_mean": float(np.mean([c["eps_c"] for c in v])),
            "mean_covered_fraction": float(np.mean([c["covered_fraction"] for c in v])),
        }
        for k, v in sorted(cov.items())
    ]
    return {"trends": trends, "bound_coverage": coverage, "n_rows": len(result.rows), "n_failures": len(result.failures)}
