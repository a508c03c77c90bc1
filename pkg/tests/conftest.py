import numpy as np
import pytest

from ssme.data import UNLABELED, EvaluationDataset

# (criterion number, passed, detail) recorded by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def make_binary_dataset(n_labeled=20, n_unlabeled=80, n_classifiers=2, shift=2.0, seed=0, groups=None):
    """Two Gaussian score clusters mapped through the logistic link."""
    rng = np.random.default_rng(seed)
    n = n_labeled + n_unlabeled
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.standard_normal((n, n_classifiers)) + shift * y[:, None]
    p1 = 1.0 / (1.0 + np.exp(-(s - shift / 2)))
    profiles = np.stack([1.0 - p1, p1], axis=2)
    labels = y.copy()
    labels[n_labeled:] = UNLABELED
    ids = [f"r{i}" for i in range(n)]
    return EvaluationDataset(profiles, labels, ids, groups), y


def random_profiles(rng, n, m, k):
    return rng.dirichlet(np.ones(k), size=(n, m))


@pytest.fixture
def binary_dataset():
    return make_binary_dataset()
