"""Additive log-ratio (ALR) transform between the probability simplex and R^(K-1).

The last class is the reference denominator. All functions accept a single
point (shape ``(K,)``) or a stack of points (shape ``(..., K)``) and operate on
the trailing axis.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS_CLIP = 1e-6


def clip_simplex(p, eps_clip: float = DEFAULT_EPS_CLIP) -> np.ndarray:
    """Floor every entry at ``eps_clip`` and renormalize to unit sum.

    Interior points whose entries all exceed ``eps_clip`` come back unchanged
    apart from the renormalization (which is exact to float precision).
    """
    if not 0.0 < eps_clip < 0.5:
        raise ValueError(f"eps_clip must lie in (0, 0.5), got {eps_clip}")
    p = np.asarray(p, dtype=float)
    floored = np.maximum(p, eps_clip)
    return floored / floored.sum(axis=-1, keepdims=True)


def alr(p) -> np.ndarray:
    """``s_i = log(p_i / p_K)`` for ``i < K``.

    Raises
    ------
    ValueError
        If any entry is not strictly positive; callers clip first.
    """
    p = np.asarray(p, dtype=float)
    if p.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if np.any(p <= 0.0):
        raise ValueError("ALR undefined for zero entries; clip the profile first")
    logp = np.log(p)
    return logp[..., :-1] - logp[..., -1:]


def alr_inverse(s) -> np.ndarray:
    """Map ALR coordinates back to the simplex.

    Evaluated as a softmax over ``[s_1, ..., s_{K-1}, 0]`` with the maximum
    subtracted first, so saturated inputs (e.g. ``[700]``) cannot overflow.
    """
    s = np.asarray(s, dtype=float)
    full = np.concatenate([s, np.zeros(s.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def profile_to_score(profile, eps_clip: float = DEFAULT_EPS_CLIP) -> np.ndarray:
    """Concatenate ``alr(clip(row_m))`` over the M classifier rows.

    ``profile`` has shape ``(M, K)`` or ``(n, M, K)``; the result has shape
    ``(M*(K-1),)`` or ``(n, M*(K-1))`` in classifier order.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.ndim < 2:
        raise ValueError("profile must be at least 2-D (classifiers x classes)")
    blocks = alr(clip_simplex(profile, eps_clip))
    return blocks.reshape(profile.shape[:-2] + (-1,))


def score_to_profile(score, n_classifiers: int, n_classes: int) -> np.ndarray:
    """Inverse of :func:`profile_to_score`: ALR blocks back to simplex rows."""
    score = np.asarray(score, dtype=float)
    blocks = score.reshape(score.shape[:-1] + (n_classifiers, n_classes - 1))
    return alr_inverse(blocks)
