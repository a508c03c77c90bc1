"""Independent reference computations used only by the tests."""

import itertools
import math

import numpy as np
from numpy.polynomial import hermite_e
from scipy import optimize


def _roughness(x, t, s):
    """Squared L2 norm of the s-th derivative of a Gaussian KDE with kernel
    variance ``t``, from exact pairwise Hermite sums (no binning, no DCT)."""
    d = (x[:, None] - x[None, :]).ravel()
    sig = math.sqrt(2.0 * t)
    u = d / sig
    coef = np.zeros(2 * s + 1)
    coef[-1] = 1.0
    phi = np.exp(-0.5 * u * u) / (sig * math.sqrt(2.0 * math.pi))
    return (-1) ** s * np.sum(phi * hermite_e.hermeval(u, coef)) / sig ** (2 * s) / x.size**2


def isj_direct(x, order=7):
    """ISJ bandwidth solved on the exact functionals of the raw sample."""
    x = np.asarray(x, dtype=float)
    n = x.size

    def g(t):
        f = _roughness(x, t, order)
        for s in range(order - 1, 1, -1):
            k0 = np.prod(np.arange(1, 2 * s, 2)) / math.sqrt(2.0 * math.pi)
            const = (1.0 + 0.5 ** (s + 0.5)) / 3.0
            time = (2.0 * const * k0 / n / f) ** (2.0 / (3.0 + 2.0 * s))
            f = _roughness(x, time, s)
        return t - (2.0 * n * math.sqrt(math.pi) * f) ** -0.4

    return math.sqrt(optimize.brentq(g, 1e-6, 1.0))


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def average_precision_loop(scores, labels):
    """Step-wise average precision walking distinct thresholds from the top."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= thr
        tp = int((labels[sel] == 1).sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / int(sel.sum())
        prev_recall = recall
    return ap


def ece_loop(conf, hits, bins):
    """Histogram calibration error with right-closed bins, first bin closed."""
    total = 0.0
    n = len(conf)
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i, c in enumerate(conf) if (lo < c <= hi) or (b == 0 and c == 0.0)]
        if members:
            gap = abs(np.mean([hits[i] for i in members]) - np.mean([conf[i] for i in members]))
            total += len(members) / n * gap
    return total
