"""Reference estimators sharing the metric engine's evaluation path.

* ``labeled_only``: metrics on the labeled records alone.
* ``pseudo_label``: L2-regularized multinomial logistic regression trained on
  labeled records, hard-labelling the unlabeled ones.
* ``dawid_skene``: EM over discretized (argmax) classifier votes with per
  classifier confusion matrices; its posteriors feed the label sampler.
* ``majority_vote``: accuracy-weighted vote of argmax predictions.
* ``ssme_marginal``: the mixture fitted to one classifier at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .data import UNLABELED, EvaluationDataset
from .metrics import (
    DEFAULT_SAMPLES,
    MetricReport,
    MetricRequest,
    estimate_metrics,
    estimate_with_fixed_labels,
)
from .mixture import FitConfig, fit
from .simplex import DEFAULT_EPS_CLIP, profile_to_score


def labeled_only(
    dataset: EvaluationDataset,
    requests: list[MetricRequest],
    group: str | None = None,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> MetricReport:
    """Metrics on labeled records only.

    With ``group``, restricts to labeled members of that group; when the group
    has no labeled members, falls back to all labeled records and sets
    ``flags["fallback"]``.
    """
    mask = dataset.labeled_mask
    if not mask.any():
        raise ValueError("labeled_only needs at least one labeled record")
    fallback = False
    if group is not None:
        in_group = mask & dataset.group_mask(group)
        if in_group.any():
            mask = in_group
        else:
            fallback = True
    report = estimate_with_fixed_labels(
        dataset.subset(mask), dataset.labels[mask], requests, samples=1, method="labeled", eps_clip=eps_clip
    )
    report.samples = None
    report.flags["fallback"] = fallback
    report.flags["n_used"] = int(mask.sum())
    return report


# ---------------------------------------------------------------------------
# Pseudo-labelling


@dataclass
class LinearClassifier:
    """Multinomial logistic regression, ``softmax(X @ coef + intercept)``."""

    coef: np.ndarray
    intercept: np.ndarray
    reg_strength: float
    loss_history: list[float] = field(default_factory=list)
    grad_norm: float = float("nan")
    converged: bool = False
    n_iter: int = 0

    def predict_proba(self, x) -> np.ndarray:
        z = np.asarray(x, dtype=float) @ self.coef + self.intercept
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def fit_logistic(
    x,
    y,
    n_classes: int,
    reg_strength: float = 1.0,
    gtol: float = 1e-6,
    max_iter: int = 1000,
) -> LinearClassifier:
    """Minimize ``C * sum_i CE_i + ||W||^2 / 2`` (intercepts unpenalized) with L-BFGS.

    ``C`` is ``reg_strength`` in the inverse-regularization convention of
    common logistic-regression libraries, so the default 1.0 matches their
    defaults.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n, p = x.shape
    k = n_classes
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def loss_grad(theta):
        w = theta[: p * k].reshape(p, k)
        b = theta[p * k :]
        z = x @ w + b
        lse = logsumexp(z, axis=1, keepdims=True)
        ce = float(np.sum(lse[:, 0] - np.sum(z * onehot, axis=1)))
        prob = np.exp(z - lse)
        resid = reg_strength * (prob - onehot)
        loss = reg_strength * ce + 0.5 * float(np.sum(w * w))
        grad = np.concatenate([(x.T @ resid + w).ravel(), resid.sum(axis=0)])
        return loss, grad

    history: list[float] = []
    theta0 = np.zeros(p * k + k)
    history.append(loss_grad(theta0)[0])

    def record(xk):
        history.append(loss_grad(xk)[0])

    res = optimize.minimize(
        loss_grad,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"gtol": gtol, "maxiter": max_iter, "ftol": 0.0},
    )
    _, grad = loss_grad(res.x)
    gnorm = float(np.max(np.abs(grad)))
    return LinearClassifier(
        coef=res.x[: p * k].reshape(p, k),
        intercept=res.x[p * k :],
        reg_strength=reg_strength,
        loss_history=history,
        grad_norm=gnorm,
        converged=gnorm <= gtol,
        n_iter=int(res.nit),
    )


def _features(dataset: EvaluationDataset, alr_features: bool, eps_clip: float) -> np.ndarray:
    if alr_features:
        return profile_to_score(dataset.profiles, eps_clip)
    return dataset.profiles.reshape(len(dataset), -1)


def pseudo_label(
    dataset: EvaluationDataset,
    requests: list[MetricRequest],
    reg_strength: float = 1.0,
    alr_features: bool = False,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> MetricReport:
    """Pseudo-label unlabeled records with a logistic regression fitted on the
    labeled ones (features: concatenated raw probability rows by default)."""
    mask = dataset.labeled_mask
    classes = np.unique(dataset.labels[mask])
    if classes.size < 2:
        raise ValueError("pseudo-labelling needs at least two classes among labeled records")
    x = _features(dataset, alr_features, eps_clip)
    clf = fit_logistic(x[mask], dataset.labels[mask], dataset.n_classes, reg_strength)
    assigned = dataset.labels.copy()
    if (~mask).any():
        assigned[~mask] = clf.predict(x[~mask])
    report = estimate_with_fixed_labels(dataset, assigned, requests, method="PL", eps_clip=eps_clip)
    report.samples = None
    report.flags.update({"converged": clf.converged, "iterations": clf.n_iter, "grad_norm": clf.grad_norm})
    return report


# ---------------------------------------------------------------------------
# Dawid-Skene


@dataclass
class ConfusionMatrices:
    """``matrices[m, k, a]`` = P(annotator m votes a | true class k)."""

    matrices: np.ndarray
    prevalence: np.ndarray


@dataclass
class DawidSkeneResult:
    confusion: ConfusionMatrices
    posterior: np.ndarray
    log_likelihood: list[float]
    iterations: int
    converged: bool


def discretize(dataset: EvaluationDataset) -> np.ndarray:
    """(n, M) argmax votes, ties to the lowest class index."""
    return np.argmax(dataset.profiles, axis=2)


def _ds_m_step(votes_onehot: np.ndarray, post: np.ndarray, prior_fallback: np.ndarray):
    # counts[m, k, a] = sum_i post[i, k] * [vote_im == a]
    counts = np.einsum("ik,ima->mka", post, votes_onehot)
    totals = counts.sum(axis=2, keepdims=True)
    k = post.shape[1]
    conf = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / k)
    prevalence = post.sum(axis=0) / post.shape[0]
    if np.any(prevalence == 0):
        prevalence = np.where(prevalence == 0, prior_fallback, prevalence)
        prevalence = prevalence / prevalence.sum()
    return conf, prevalence


def _ds_log_joint(votes_onehot: np.ndarray, conf: np.ndarray, prevalence: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_conf = np.log(conf)
        log_prev = np.log(prevalence)
    # (n, K): log pi_k + sum_m log conf[m, k, vote_im]
    return log_prev[None, :] + np.einsum("ima,mka->ik", votes_onehot, np.where(np.isfinite(log_conf), log_conf, -1e300))


def dawid_skene_em(
    votes: np.ndarray,
    n_classes: int,
    labels: np.ndarray | None = None,
    tol: float = 1e-5,
    max_iter: int = 100,
) -> DawidSkeneResult:
    """Dawid-Skene EM on an (n, M) matrix of discrete votes.

    Rows with a known label (``labels[i] >= 0``) are pinned to it. Prevalence
    starts at the labeled class frequencies (uniform if none), confusion
    matrices at their fit to the unweighted majority vote. Stops when no
    parameter moves by more than ``tol`` or after ``max_iter`` iterations.
    ``log_likelihood`` records the observed-data log-likelihood of every
    parameter set visited.
    """
    votes = np.asarray(votes, dtype=np.int64)
    n, m = votes.shape
    k = n_classes
    labels = np.full(n, UNLABELED) if labels is None else np.asarray(labels, dtype=np.int64)
    known = labels != UNLABELED
    onehot = np.zeros((n, m, k))
    onehot[np.arange(n)[:, None], np.arange(m)[None, :], votes] = 1.0

    pinned = np.zeros((n, k))
    pinned[np.flatnonzero(known), labels[known]] = 1.0

    mv = np.argmax(onehot.sum(axis=1), axis=1)
    post = np.zeros((n, k))
    post[np.arange(n), mv] = 1.0
    post[known] = pinned[known]
    if known.any():
        prevalence = np.bincount(labels[known], minlength=k).astype(float)
        prevalence = np.maximum(prevalence, 0.5) / np.maximum(prevalence, 0.5).sum()
    else:
        prevalence = np.full(k, 1.0 / k)
    uniform = np.full(k, 1.0 / k)
    conf, _ = _ds_m_step(onehot, post, uniform)

    def observed_ll(conf, prevalence):
        lj = _ds_log_joint(onehot, conf, prevalence)
        val = float(np.sum(lj[np.flatnonzero(known), labels[known]]))
        if (~known).any():
            val += float(np.sum(logsumexp(lj[~known], axis=1)))
        return val

    history = [observed_ll(conf, prevalence)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lj = _ds_log_joint(onehot, conf, prevalence)
        post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        post[known] = pinned[known]
        new_conf, new_prev = _ds_m_step(onehot, post, uniform)
        delta = max(np.max(np.abs(new_conf - conf)), np.max(np.abs(new_prev - prevalence)))
        conf, prevalence = new_conf, new_prev
        history.append(observed_ll(conf, prevalence))
        if delta < tol:
            converged = True
            break

    lj = _ds_log_joint(onehot, conf, prevalence)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    post[known] = pinned[known]
    return DawidSkeneResult(ConfusionMatrices(conf, prevalence), post, history, it, converged)


def dawid_skene(
    dataset: EvaluationDataset,
    requests: list[MetricRequest] | None = None,
    tol: float = 1e-5,
    max_iter: int = 100,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> tuple[DawidSkeneResult, MetricReport | None]:
    """Run Dawid-Skene on argmax votes; metrics (if requested) come from the
    label sampler fed with the per-example posteriors."""
    result = dawid_skene_em(discretize(dataset), dataset.n_classes, dataset.labels, tol, max_iter)
    report = None
    if requests is not None:
        report = estimate_with_fixed_labels(
            dataset, result.posterior, requests, seed=seed, samples=samples, method="DS", eps_clip=eps_clip
        )
        report.flags.update({"converged": result.converged, "iterations": result.iterations})
    return result, report


# ---------------------------------------------------------------------------
# Majority vote


def majority_vote_labels(dataset: EvaluationDataset) -> tuple[np.ndarray, np.ndarray]:
    """Accuracy-weighted vote; returns (labels, classifier weights).

    Weights are each classifier's argmax accuracy on labeled records; labeled
    records keep their true labels; ties go to the lowest class index.
    """
    mask = dataset.labeled_mask
    if not mask.any():
        raise ValueError("majority vote needs labeled records to weight classifiers")
    votes = discretize(dataset)
    weights = np.maximum((votes[mask] == dataset.labels[mask][:, None]).mean(axis=0), 0.0)
    tally = np.zeros((len(dataset), dataset.n_classes))
    for j in range(dataset.n_classifiers):
        tally[np.arange(len(dataset)), votes[:, j]] += weights[j]
    assigned = np.argmax(tally, axis=1)
    assigned[mask] = dataset.labels[mask]
    return assigned, weights


def majority_vote(
    dataset: EvaluationDataset,
    requests: list[MetricRequest] | None = None,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> tuple[np.ndarray, MetricReport | None]:
    assigned, weights = majority_vote_labels(dataset)
    report = None
    if requests is not None:
        report = estimate_with_fixed_labels(dataset, assigned, requests, method="MV", eps_clip=eps_clip)
        report.samples = None
        report.flags["classifier_weights"] = weights.tolist()
    return assigned, report


# ---------------------------------------------------------------------------
# SSME and its marginal ablation


def ssme(
    dataset: EvaluationDataset,
    requests: list[MetricRequest],
    fit_config: FitConfig | None = None,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
) -> MetricReport:
    """Fit the joint mixture and estimate every request by label sampling."""
    fit_config = fit_config or FitConfig(seed=seed)
    model = fit(dataset, fit_config)
    report = estimate_metrics(model, dataset, requests, seed=seed, samples=samples, method="SSME")
    report.flags.update({"epochs": model.epochs, "converged": model.converged})
    return report


def ssme_marginal(
    dataset: EvaluationDataset,
    j: int,
    requests: list[MetricRequest],
    fit_config: FitConfig | None = None,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
) -> MetricReport:
    """Mixture fitted to classifier ``j``'s scores alone, estimating classifier ``j``."""
    own = [MetricRequest(r.kind, 0, r.bin_count, r.threshold) for r in requests if r.classifier == j]
    report = ssme(dataset.classifier(j), own, fit_config, seed, samples)
    report.method = "SSME-M"
    report.estimates = {(j, name): est for (_, name), est in report.estimates.items()}
    report.errors = {(j, name): err for (_, name), err in report.errors.items()}
    report.flags["classifier"] = j
    return report
