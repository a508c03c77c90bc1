"""Classifier performance metrics and the sampling-based estimator over a fitted mixture.

Every metric is implemented once, in a batched form that scores a fixed set of
classifier probabilities against many label vectors at a time (one per
sampling round). The single-label-vector functions are thin wrappers, so
direct computation, the labeled-only baseline and the sampler all share the
same arithmetic.

Conventions
-----------
* Binary accuracy predicts the positive class (index 1) iff ``p > t``;
  multiclass accuracy uses argmax with ties going to the lowest index.
* ECE uses ``bin_count`` equal-width, right-closed bins on [0, 1]; a score of
  exactly 0 falls in the first bin.
* AUC is the Mann-Whitney statistic with half credit for ties.
* AUPRC is step-wise average precision; tied scores enter together.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import UNLABELED, EvaluationDataset
from .seeding import rng_for
from .simplex import DEFAULT_EPS_CLIP, profile_to_score, score_to_profile

DEFAULT_SAMPLES = 500


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""


class UnestimableMetricError(RuntimeError):
    """Every sampling round left the metric undefined."""


class MetricKind(str, enum.Enum):
    ACCURACY = "acc"
    ECE_BINARY = "ece"
    ECE_TOP_LABEL = "ece_top"
    AUC = "auc"
    AUPRC = "auprc"

    @property
    def binary_only(self) -> bool:
        return self in (MetricKind.ECE_BINARY, MetricKind.AUC, MetricKind.AUPRC)


@dataclass(frozen=True)
class MetricRequest:
    kind: MetricKind
    classifier: int = 0
    bin_count: int = 10
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if self.bin_count < 2:
            raise ValueError("bin_count must be >= 2")

    @property
    def name(self) -> str:
        return self.kind.value

    def check(self, n_classifiers: int, n_classes: int) -> None:
        if not 0 <= self.classifier < n_classifiers:
            raise ValueError(f"classifier index {self.classifier} outside [0, {n_classifiers})")
        if self.kind.binary_only and n_classes != 2:
            raise ValueError(f"{self.name} is only defined for binary tasks")


def requests_for(kinds, n_classifiers: int, **params) -> list[MetricRequest]:
    """One request per (classifier, metric kind), classifier-major."""
    return [MetricRequest(MetricKind(k), j, **params) for j in range(n_classifiers) for k in kinds]


# ---------------------------------------------------------------------------
# Batched metric kernels. ``labels`` is (R, n); results are (values, defined).


def _bin_index(scores: np.ndarray, bin_count: int) -> np.ndarray:
    edges = np.linspace(0.0, 1.0, bin_count + 1)
    return np.clip(np.searchsorted(edges, scores, side="left") - 1, 0, bin_count - 1)


def _binned_gap(conf: np.ndarray, hits: np.ndarray, bin_count: int) -> np.ndarray:
    """sum_b (n_b / n) |mean(hits in b) - mean(conf in b)| for each row of ``hits``."""
    n = conf.size
    b = _bin_index(conf, bin_count)
    onehot = np.zeros((n, bin_count))
    onehot[np.arange(n), b] = 1.0
    n_b = onehot.sum(axis=0)
    used = n_b > 0
    mean_conf = (conf @ onehot)[used] / n_b[used]
    rate = (hits @ onehot)[:, used] / n_b[used]
    return np.abs(rate - mean_conf) @ (n_b[used] / n)


def batch_values(probs: np.ndarray, labels: np.ndarray, request: MetricRequest) -> tuple[np.ndarray, np.ndarray]:
    """Metric value for every label row.

    Parameters
    ----------
    probs : (n, K) class probabilities of the requested classifier.
    labels : (R, n) integer labels, one row per round.
    """
    labels = np.atleast_2d(labels)
    r, n = labels.shape
    if n == 0:
        raise ValueError("empty input")
    kind = request.kind
    defined = np.ones(r, dtype=bool)
    if kind is MetricKind.ACCURACY:
        if probs.shape[1] == 2:
            pred = (probs[:, 1] > request.threshold).astype(np.int64)
        else:
            pred = np.argmax(probs, axis=1)
        return (labels == pred).mean(axis=1), defined
    if kind is MetricKind.ECE_BINARY:
        return _binned_gap(probs[:, 1], (labels == 1).astype(float), request.bin_count), defined
    if kind is MetricKind.ECE_TOP_LABEL:
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(n), pred]
        return _binned_gap(conf, (labels == pred).astype(float), request.bin_count), defined
    pos = labels == 1
    n_pos = pos.sum(axis=1)
    scores = probs[:, 1]
    if kind is MetricKind.AUC:
        n_neg = n - n_pos
        defined = (n_pos > 0) & (n_neg > 0)
        ranks = rankdata(scores)
        u = pos.astype(float) @ ranks - n_pos * (n_pos + 1) / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            return u / (n_pos * n_neg), defined
    if kind is MetricKind.AUPRC:
        defined = n_pos > 0
        order = np.argsort(-scores, kind="stable")
        s_sorted = scores[order]
        ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
        tp = np.cumsum(pos[:, order], axis=1)[:, ends].astype(float)
        d_tp = np.diff(tp, axis=1, prepend=0.0)
        precision = tp / (ends + 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return (d_tp * precision).sum(axis=1) / n_pos, defined
    raise ValueError(f"unsupported metric {kind}")


def _single(probs, labels, request: MetricRequest) -> float:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty input")
    if probs.shape[0] != labels.size:
        raise ValueError("scores and labels differ in length")
    values, defined = batch_values(probs, labels[None, :], request)
    if not defined[0]:
        raise UndefinedMetricError(f"{request.name} undefined: labels contain a single class")
    return float(values[0])


def _as_binary(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim == 2:
        if s.shape[1] != 2:
            raise ValueError("binary metric needs K = 2")
        return s
    return np.stack([1.0 - s, s], axis=1)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of examples whose discretized prediction equals the label.

    ``scores`` is an (n, K) probability matrix, or a 1-D vector of
    positive-class probabilities for binary tasks.
    """
    s = np.asarray(scores, dtype=float)
    probs = _as_binary(s) if s.ndim == 1 else s
    return _single(probs, labels, MetricRequest(MetricKind.ACCURACY, threshold=threshold))


def ece_binary(scores, labels, bin_count: int = 10) -> float:
    return _single(_as_binary(scores), labels, MetricRequest(MetricKind.ECE_BINARY, bin_count=bin_count))


def ece_top_label(profiles, labels, bin_count: int = 10) -> float:
    """Top-label calibration error: bins the argmax confidence and compares it
    with the accuracy of the argmax prediction in each bin."""
    return _single(np.asarray(profiles, dtype=float), labels, MetricRequest(MetricKind.ECE_TOP_LABEL, bin_count=bin_count))


def auc(scores, labels) -> float:
    return _single(_as_binary(scores), labels, MetricRequest(MetricKind.AUC))


def auprc(scores, labels) -> float:
    return _single(_as_binary(scores), labels, MetricRequest(MetricKind.AUPRC))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricEstimate:
    value: float
    sampling_sd: float
    rounds_used: int
    skipped: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "sampling_sd": self.sampling_sd,
            "rounds_used": self.rounds_used,
            "skipped": dict(self.skipped),
        }


@dataclass
class MetricReport:
    """Per-classifier, per-metric estimates of one method on one dataset."""

    method: str
    estimates: dict[tuple[int, str], MetricEstimate] = field(default_factory=dict)
    errors: dict[tuple[int, str], str] = field(default_factory=dict)
    seed: int | None = None
    samples: int | None = None
    config: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def value(self, classifier: int, metric: str) -> float:
        key = (classifier, MetricKind(metric).value)
        if key in self.errors:
            raise UnestimableMetricError(self.errors[key])
        return self.estimates[key].value

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "samples": self.samples,
            "config": self.config,
            "flags": self.flags,
            "estimates": [
                {"classifier": j, "metric": m, **est.to_dict()} for (j, m), est in sorted(self.estimates.items())
            ],
            "errors": [{"classifier": j, "metric": m, "reason": r} for (j, m), r in sorted(self.errors.items())],
        }


def metric_profiles(profiles: np.ndarray, eps_clip: float = DEFAULT_EPS_CLIP) -> np.ndarray:
    """Probabilities the metrics are evaluated on: clipped profiles passed
    through ALR and back, exactly as the mixture sees them."""
    n, m, k = profiles.shape
    return score_to_profile(profile_to_score(profiles, eps_clip), m, k)


def _round_labels(fixed: np.ndarray, dist: np.ndarray | None, seed: int, samples: int, scope: np.ndarray) -> np.ndarray:
    """(samples, |scope|) labels: fixed where known, sampled elsewhere.

    Round ``r`` draws one uniform per dataset row from its own substream, so
    the label of row ``i`` in round ``r`` does not depend on which other rows
    are in scope.
    """
    n = fixed.size
    out = np.empty((samples, scope.size), dtype=np.int64)
    free = fixed[scope] == UNLABELED
    cdf = np.cumsum(dist[scope][free], axis=1) if dist is not None else None
    for r in range(samples):
        row = fixed[scope].copy()
        if free.any():
            u = rng_for(seed, r).random(n)[scope][free] * cdf[:, -1]
            row[free] = np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)
        out[r] = row
    return out


def _estimate(
    probs: np.ndarray,
    fixed: np.ndarray,
    dist: np.ndarray | None,
    requests: list[MetricRequest],
    seed: int,
    samples: int,
    method: str,
    scope: np.ndarray | None = None,
    expectation: bool = False,
) -> MetricReport:
    n, m, k = probs.shape
    if samples < 1:
        raise ValueError("samples must be >= 1")
    scope = np.arange(n) if scope is None else np.asarray(scope)
    if scope.size == 0:
        raise ValueError("no records in scope")
    for req in requests:
        req.check(m, k)
    report = MetricReport(method=method, seed=seed, samples=samples)
    needs_sampling = bool(np.any(fixed[scope] == UNLABELED))

    if expectation:
        return _estimate_expected(probs, fixed, dist, requests, report, scope)

    if needs_sampling:
        labels = _round_labels(fixed, dist, seed, samples, scope)
    else:
        labels = fixed[scope][None, :]

    for req in requests:
        key = (req.classifier, req.name)
        values, defined = batch_values(probs[scope, req.classifier, :], labels, req)
        skipped = int((~defined).sum())
        if not defined.any():
            report.errors[key] = f"metric unestimable: {req.name} undefined in every round (single-class labels)"
            continue
        used = values[defined]
        if needs_sampling:
            est = MetricEstimate(float(used.mean()), float(used.std()), int(used.size))
        else:
            est = MetricEstimate(float(used[0]), 0.0, samples)
        if skipped:
            est.skipped = {"undefined": skipped}
        report.estimates[key] = est
    return report


def _estimate_expected(probs, fixed, dist, requests, report: MetricReport, scope) -> MetricReport:
    """Posterior-expectation path (accuracy and ECE only)."""
    k = probs.shape[2]
    q = np.zeros((scope.size, k))
    f = fixed[scope]
    known = f != UNLABELED
    q[np.flatnonzero(known), f[known]] = 1.0
    if (~known).any():
        q[~known] = dist[scope][~known]
    for req in requests:
        key = (req.classifier, req.name)
        p = probs[scope, req.classifier, :]
        if req.kind is MetricKind.ACCURACY:
            pred = (p[:, 1] > req.threshold).astype(np.int64) if k == 2 else np.argmax(p, axis=1)
            value = float(q[np.arange(scope.size), pred].mean())
        elif req.kind is MetricKind.ECE_BINARY:
            value = float(_binned_gap(p[:, 1], q[:, 1][None, :], req.bin_count)[0])
        elif req.kind is MetricKind.ECE_TOP_LABEL:
            pred = np.argmax(p, axis=1)
            conf = p[np.arange(scope.size), pred]
            value = float(_binned_gap(conf, q[np.arange(scope.size), pred][None, :], req.bin_count)[0])
        else:
            report.errors[key] = f"expectation path does not support {req.name}"
            continue
        report.estimates[key] = MetricEstimate(value, 0.0, 1)
    report.flags["expectation"] = True
    return report


def estimate_metrics(
    model,
    dataset: EvaluationDataset,
    requests: list[MetricRequest],
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    scope=None,
    expectation: bool = False,
    method: str = "SSME",
) -> MetricReport:
    """Sampling-based metric estimation over a fitted mixture.

    Each of ``samples`` rounds draws a label for every unlabeled record from
    the model's posterior, keeps the true labels of labeled records, and
    scores every request on the union. The estimate is the mean over rounds in
    which the metric is defined; undefined rounds are skipped and tallied.

    ``scope`` restricts scoring to a subset of rows (index array or mask)
    while keeping each row's random stream unchanged.
    """
    from .mixture import dataset_posteriors

    post = dataset_posteriors(model, dataset)
    probs = metric_profiles(dataset.profiles, model.config.eps_clip)
    if scope is not None:
        scope = np.asarray(scope)
        if scope.dtype == bool:
            scope = np.flatnonzero(scope)
    report = _estimate(probs, dataset.labels, post.probs, requests, seed, samples, method, scope, expectation)
    report.config = {"fit": model.config.to_dict(), "eps_clip": model.config.eps_clip}
    if post.underflow.any():
        report.flags["posterior_underflow_rows"] = int(post.underflow.sum())
    return report


def estimate_with_fixed_labels(
    dataset: EvaluationDataset,
    assignment,
    requests: list[MetricRequest],
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    method: str = "fixed",
    eps_clip: float = DEFAULT_EPS_CLIP,
    scope=None,
) -> MetricReport:
    """Score requests against a per-record label assignment.

    ``assignment`` is either an (n,) vector of class indices, computed once,
    or an (n, K) matrix of label distributions fed through the same
    round-based sampler as :func:`estimate_metrics`. One-hot distributions
    take the hard-label path.
    """
    n, k = len(dataset), dataset.n_classes
    a = np.asarray(assignment)
    probs = metric_profiles(dataset.profiles, eps_clip)
    if scope is not None:
        scope = np.asarray(scope)
        if scope.dtype == bool:
            scope = np.flatnonzero(scope)
    if a.ndim == 1:
        if a.shape != (n,):
            raise ValueError("assignment must cover every record")
        if np.any(a < 0) or np.any(a >= k):
            raise ValueError("assignment missing or out of range for some record")
        return _estimate(probs, a.astype(np.int64), None, requests, seed, samples, method, scope)
    if a.shape != (n, k):
        raise ValueError("assignment must cover every record")
    a = a.astype(float)
    if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("assignment distributions must be finite and sum to one for every record")
    hard = a.max(axis=1) == 1.0
    fixed = np.where(hard, np.argmax(a, axis=1), UNLABELED).astype(np.int64)
    return _estimate(probs, fixed, a, requests, seed, samples, method, scope)


def sampling_standard_error(estimate: MetricEstimate) -> float:
    return estimate.sampling_sd / math.sqrt(max(estimate.rounds_used, 1))
