"""Semi-supervised mixture of class-conditional KDEs fitted by EM.

Each class ``k`` owns a weighted KDE over all estimation-split score vectors,
with point ``i`` weighted by ``w_i * gamma_ik``: labeled rows are pinned to
their one-hot label, unlabeled rows carry their current responsibilities.
``w_i`` is ``lambda_u`` for unlabeled points and 1 for labeled points, and the
same factor scales unlabeled contributions to the class priors. With the
default ``lambda_u = 1`` this is the plain semi-supervised EM.

Bandwidths are selected once, per dimension, on the pooled scores of every
point that carries M-step weight, and are shared by all class components.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import EvaluationDataset
from .kde import (
    MIN_WEIGHT,
    SharedKernel,
    BandwidthVector,
    KdeComponent,
    build_component,
    log_kernel,
    select_bandwidths,
    weighted_log_densities,
)
from .simplex import DEFAULT_EPS_CLIP, clip_simplex, profile_to_score

log = logging.getLogger(__name__)

MODEL_FORMAT = "ssme-mixture/1"


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    lambda_u: float = 1.0
    max_epochs: int = 1000
    tol: float = 1e-6
    seed: int = 0
    loo: bool = True
    eps_prior: float = 1e-6
    eps_clip: float = DEFAULT_EPS_CLIP
    bandwidth_method: str = "isj"
    bandwidth: float | None = None
    bandwidth_scale: float = 1.0

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.bandwidth_scale > 0:
            raise ValueError("bandwidth_scale must be > 0")
        if not 0 < self.eps_prior < 1:
            raise ValueError("eps_prior must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FittedMixture:
    """Fitted priors plus the shared point set and per-class point weights.

    ``weights[:, k]`` are the KDE weights of class ``k``; ``point_ids`` lets
    callers recognise queries that are themselves points of the model.
    """

    priors: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    bandwidth: BandwidthVector
    config: FitConfig
    n_classifiers: int
    n_classes: int
    point_ids: tuple[str, ...] = ()
    responsibilities: np.ndarray | None = None
    fixed_mask: np.ndarray | None = None
    epochs: int = 0
    converged: bool = False
    max_change: float = float("nan")
    rebuilt_classes: tuple[int, ...] = ()
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def components(self) -> list[KdeComponent]:
        return [build_component(self.points, self.weights[:, k], self.bandwidth) for k in range(self.n_classes)]

    def component_log_densities(self, queries, exclude=None) -> np.ndarray:
        """(q, K) log densities; ``exclude[i]`` names a point to leave out (-1: none)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if queries.shape[1] != self.dim:
            raise ValueError(f"query dimension {queries.shape[1]} != model dimension {self.dim}")
        out = np.empty((queries.shape[0], self.n_classes))
        step = max(1, 4_000_000 // max(1, self.points.shape[0]))
        for start in range(0, queries.shape[0], step):
            sl = slice(start, start + step)
            lk = log_kernel(queries[sl], self.points, self.bandwidth.h)
            ex = None if exclude is None else np.asarray(exclude)[sl]
            out[sl] = weighted_log_densities(lk, self.weights, ex)
        return out

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "n_classifiers": self.n_classifiers,
            "n_classes": self.n_classes,
            "priors": self.priors.tolist(),
            "bandwidth": {"values": self.bandwidth.h.tolist(), "methods": list(self.bandwidth.methods)},
            "point_ids": list(self.point_ids),
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
            "config": self.config.to_dict(),
            "epochs": self.epochs,
            "converged": self.converged,
            "max_change": self.max_change,
            "rebuilt_classes": list(self.rebuilt_classes),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FittedMixture":
        if obj.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} document")
        bw = BandwidthVector(np.array(obj["bandwidth"]["values"], dtype=float), tuple(obj["bandwidth"]["methods"]))
        return cls(
            priors=np.array(obj["priors"], dtype=float),
            points=np.array(obj["points"], dtype=float).reshape(-1, bw.dim),
            weights=np.array(obj["weights"], dtype=float).reshape(-1, obj["n_classes"]),
            bandwidth=bw,
            config=FitConfig(**obj["config"]),
            n_classifiers=int(obj["n_classifiers"]),
            n_classes=int(obj["n_classes"]),
            point_ids=tuple(obj["point_ids"]),
            epochs=int(obj["epochs"]),
            converged=bool(obj["converged"]),
            max_change=float(obj["max_change"]),
            rebuilt_classes=tuple(obj.get("rebuilt_classes", ())),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedMixture":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def floor_priors(priors: np.ndarray, eps: float) -> np.ndarray:
    """Raise entries below ``eps`` to ``eps``, shrinking the rest proportionally.

    Leaves vectors already above the floor untouched (bit for bit).
    """
    priors = np.asarray(priors, dtype=float)
    low = priors < eps
    if not low.any():
        return priors
    out = priors.copy()
    out[low] = eps
    rest = priors[~low].sum()
    out[~low] = priors[~low] * (1.0 - eps * low.sum()) / rest
    return out


def initialize(dataset: EvaluationDataset, seed: int, eps_clip: float = DEFAULT_EPS_CLIP) -> np.ndarray:
    """Initial responsibilities: one-hot labels, and for unlabeled rows a class
    drawn from the classifier-averaged probability row of that example."""
    n, k = len(dataset), dataset.n_classes
    mask = dataset.labeled_mask
    gamma = np.zeros((n, k))
    gamma[np.flatnonzero(mask), dataset.labels[mask]] = 1.0
    mean_profile = clip_simplex(dataset.profiles, eps_clip).mean(axis=1)
    cdf = np.cumsum(mean_profile, axis=1)
    u = np.random.default_rng(seed).random(n) * cdf[:, -1]
    drawn = np.minimum((u[:, None] >= cdf).sum(axis=1), k - 1)
    unl = np.flatnonzero(~mask)
    gamma[unl, drawn[unl]] = 1.0
    return gamma


def _prior_update(gamma: np.ndarray, mask: np.ndarray, lambda_u: float, eps: float) -> np.ndarray:
    counts = gamma[mask].sum(axis=0) + lambda_u * gamma[~mask].sum(axis=0)
    total = mask.sum() + lambda_u * (~mask).sum()
    return floor_priors(counts / total, eps)


def _component_weights(gamma, mask, lambda_u, labels, n_classes, rebuilt: set[int]):
    w = np.where(mask, 1.0, lambda_u)[:, None] * gamma
    for k in range(n_classes):
        if w[:, k].sum() < MIN_WEIGHT:
            own = mask & (labels == k)
            if not own.any():
                raise FitError(f"class {k} has no effective weight and no labeled examples to rebuild from")
            w[:, k] = own.astype(float)
            rebuilt.add(k)
    return w


def fit(dataset: EvaluationDataset, config: FitConfig | None = None) -> FittedMixture:
    """Fit class priors and class-conditional KDEs by semi-supervised EM.

    Epochs alternate an E-step (responsibilities of unlabeled rows from the
    current priors and component densities, labeled rows pinned) and an M-step
    (priors from weighted effective counts, components rebuilt with the new
    responsibilities as weights). Iteration stops after ``max_epochs`` or once
    no responsibility moves by ``tol`` or more.

    A class whose effective weight collapses is floored at ``eps_prior`` and
    rebuilt from its labeled rows; with no labeled rows either, fitting fails.
    """
    config = config or FitConfig()
    k = dataset.n_classes
    if dataset.n_labeled == 0:
        raise FitError("fit requires at least one labeled example")
    mask = dataset.labeled_mask
    labels = dataset.labels
    missing = [c for c in range(k) if not np.any(labels[mask] == c)]
    if missing:
        warnings.warn(f"classes {missing} unseen among labeled examples", RuntimeWarning, stacklevel=2)

    scores = profile_to_score(dataset.profiles, config.eps_clip)
    carries_weight = mask | (config.lambda_u > 0)
    bandwidth = select_bandwidths(scores[carries_weight], config.bandwidth_method, config.bandwidth)
    if config.bandwidth_scale != 1.0:
        bandwidth = BandwidthVector(bandwidth.h * config.bandwidth_scale, bandwidth.methods)

    log_k = log_kernel(scores, scores, bandwidth.h)
    unl = np.flatnonzero(~mask)
    exclude = unl if config.loo else None
    kernel = SharedKernel(log_k[unl], exclude)
    del log_k

    gamma = initialize(dataset, config.seed, config.eps_clip)
    priors = floor_priors(np.bincount(labels[mask], minlength=k) / mask.sum(), config.eps_prior)
    rebuilt: set[int] = set()
    weights = _component_weights(gamma, mask, config.lambda_u, labels, k, rebuilt)

    epochs, change, converged = 0, float("nan"), False
    history: list[float] = []
    for epoch in range(config.max_epochs):
        if unl.size == 0:
            converged = True
            change = 0.0
            break
        logd = kernel.log_densities(weights)
        joint = np.log(priors)[None, :] + logd
        norm = logsumexp(joint, axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            new = np.exp(joint - norm)
        dead = ~np.isfinite(norm[:, 0])
        if dead.any():
            new[dead] = priors
        change = float(np.max(np.abs(new - gamma[unl])))
        gamma[unl] = new
        history.append(float(np.sum(norm[~dead])))

        priors = _prior_update(gamma, mask, config.lambda_u, config.eps_prior)
        weights = _component_weights(gamma, mask, config.lambda_u, labels, k, rebuilt)
        epochs = epoch + 1
        if change < config.tol:
            converged = True
            break

    if unl.size == 0:
        priors = _prior_update(gamma, mask, config.lambda_u, config.eps_prior)
    for c in sorted(rebuilt):
        log.warning("class %d component rebuilt from labeled rows", c)
    log.debug("EM finished after %d epochs (max change %.3g)", epochs, change)

    return FittedMixture(
        priors=priors,
        points=scores,
        weights=weights,
        bandwidth=bandwidth,
        config=config,
        n_classifiers=dataset.n_classifiers,
        n_classes=k,
        point_ids=dataset.ids,
        responsibilities=gamma,
        fixed_mask=mask.copy(),
        epochs=epochs,
        converged=converged,
        max_change=change,
        rebuilt_classes=tuple(sorted(rebuilt)),
        history=history,
    )


@dataclass(frozen=True)
class Posterior:
    probs: np.ndarray
    underflow: np.ndarray


def _normalize(model: FittedMixture, logd: np.ndarray) -> Posterior:
    joint = np.log(model.priors)[None, :] + logd
    norm = logsumexp(joint, axis=1, keepdims=True)
    bad = ~np.isfinite(norm[:, 0])
    with np.errstate(invalid="ignore"):
        probs = np.exp(joint - norm)
    probs[bad] = model.priors
    return Posterior(probs, bad)


def posterior_batch(model: FittedMixture, scores, exclude=None) -> Posterior:
    return _normalize(model, model.component_log_densities(scores, exclude))


def posterior(model: FittedMixture, s) -> np.ndarray:
    """``P(y | s)`` for one score vector, from the full (no leave-one-out) KDEs.

    When every component underflows the priors are returned and a
    ``RuntimeWarning`` is issued.
    """
    post = posterior_batch(model, np.atleast_2d(np.asarray(s, dtype=float)))
    if post.underflow[0]:
        warnings.warn("all component densities underflowed; returning priors", RuntimeWarning, stacklevel=2)
    return post.probs[0]


def member_exclusions(model: FittedMixture, dataset: EvaluationDataset) -> np.ndarray | None:
    """Point index of each dataset row inside the model (-1 if not a point).

    Returns None when the model was fitted without leave-one-out, in which case
    member rows are evaluated like any other query.
    """
    if not model.config.loo:
        return None
    lookup = {pid: i for i, pid in enumerate(model.point_ids)}
    ex = np.array([lookup.get(rid, -1) for rid in dataset.ids], dtype=np.int64)
    return ex if np.any(ex >= 0) else None


def dataset_posteriors(model: FittedMixture, dataset: EvaluationDataset) -> Posterior:
    """Posteriors for every row of ``dataset``.

    Rows that are points of a leave-one-out model are scored without their own
    kernel, matching the responsibilities EM converged to.
    """
    if dataset.n_classifiers != model.n_classifiers or dataset.n_classes != model.n_classes:
        raise ValueError("dataset and model dimensions differ")
    scores = profile_to_score(dataset.profiles, model.config.eps_clip)
    return posterior_batch(model, scores, member_exclusions(model, dataset))


def log_likelihood(model: FittedMixture, dataset: EvaluationDataset, lambda_u: float | None = None) -> float:
    """Labeled log-likelihood plus ``lambda_u`` times the unlabeled marginal one.

    Rows that are points of the model are left out of their own density when
    the model was fitted with leave-one-out.
    """
    lam = model.config.lambda_u if lambda_u is None else lambda_u
    scores = profile_to_score(dataset.profiles, model.config.eps_clip)
    logd = model.component_log_densities(scores, member_exclusions(model, dataset))
    joint = np.log(model.priors)[None, :] + logd
    mask = dataset.labeled_mask
    total = float(np.sum(joint[np.flatnonzero(mask), dataset.labels[mask]]))
    if (~mask).any() and lam != 0:
        total += lam * float(np.sum(logsumexp(joint[~mask], axis=1)))
    return total
