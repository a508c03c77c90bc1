import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_binary_dataset
from ssme.data import UNLABELED, DatasetError, EvaluationDataset
from ssme.harness import (
    ESS_SIZES,
    EssCurve,
    TrialResult,
    confidence_interval,
    effective_sample_size,
    ess_curve,
    ess_pool,
    ground_truth,
    mae,
    make_split,
    method_error_for_ess,
    rescaled_mae,
    resolve_threads,
    run_single_trial,
    run_trials,
    subgroup_estimates,
    summarize_trials,
)
from ssme.metrics import estimate_metrics, requests_for
from ssme.mixture import FitConfig, fit


def pool_of(n, seed=0, n_classifiers=2, shift=2.0):
    ds, _ = make_binary_dataset(n_labeled=n, n_unlabeled=0, n_classifiers=n_classifiers, shift=shift, seed=seed)
    return ds


def imbalanced_pool(n=300, positives=3):
    ds = pool_of(n, seed=5)
    labels = np.zeros(n, dtype=np.int64)
    labels[-positives:] = 1
    return ds.with_labels(labels)


class TestSplit:
    def test_partition(self):
        pool = pool_of(200)
        sp = make_split(pool, 20, 80, seed=1)
        assert len(sp.estimation) == 100 and len(sp.evaluation) == 100
        assert not set(sp.estimation.ids) & set(sp.evaluation.ids)
        assert set(sp.estimation.ids) | set(sp.evaluation.ids) == set(pool.ids)
        assert np.all(sp.estimation.labels[20:] == UNLABELED)
        np.testing.assert_array_equal(sp.truth, pool.labels[sp.index])

    def test_deterministic(self):
        pool = pool_of(100)
        np.testing.assert_array_equal(make_split(pool, 10, 30, 4).index, make_split(pool, 10, 30, 4).index)

    def test_no_unlabeled(self):
        sp = make_split(pool_of(100), 30, 0, seed=2)
        assert sp.estimation.n_labeled == 30

    @pytest.mark.parametrize("seed", range(20))
    def test_imbalanced_pair_covers_classes(self, seed):
        sp = make_split(imbalanced_pool(), 2, 50, seed)
        assert sorted(sp.estimation.labels[:2].tolist()) == [0, 1]
        assert len(set(sp.index.tolist())) == 52

    def test_swap_in_when_retries_fail(self):
        pool = imbalanced_pool(n=2000, positives=1)
        sp = make_split(pool, 2, 10, seed=0)
        assert sorted(sp.estimation.labels[:2].tolist()) == [0, 1]
        assert len(set(sp.index.tolist())) == 12

    def test_pool_too_small(self):
        with pytest.raises(DatasetError, match="too small"):
            make_split(pool_of(50), 20, 30, 0)

    def test_class_absent(self):
        pool = pool_of(50)
        with pytest.raises(DatasetError, match="absent"):
            make_split(pool.with_labels(np.zeros(50, dtype=np.int64)), 5, 5, 0)

    def test_pool_must_be_labeled(self):
        ds, _ = make_binary_dataset(n_labeled=20, n_unlabeled=20)
        with pytest.raises(DatasetError):
            make_split(ds, 5, 5, 0)


class TestStatistics:
    def test_ci(self):
        m, h = confidence_interval([1, 2, 3])
        assert m == 2.0
        assert h == pytest.approx(1.96 / math.sqrt(3), abs=1e-15)
        assert h == pytest.approx(1.13161, abs=5e-6)

    def test_ci_constant_and_short(self):
        assert confidence_interval([0.4] * 6)[1] == pytest.approx(0.0, abs=1e-15)
        with pytest.raises(ValueError):
            confidence_interval([1.0])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.randoms())
    def test_ci_permutation_invariant(self, vals, rnd):
        shuffled = list(vals)
        rnd.shuffle(shuffled)
        a, b = confidence_interval(vals), confidence_interval(shuffled)
        assert a[0] == pytest.approx(b[0], abs=1e-9) and a[1] == pytest.approx(b[1], abs=1e-9)

    def test_mae(self):
        assert mae([1, 2, 3]) == 2.0
        with pytest.raises(ValueError):
            mae([])

    @staticmethod
    def _results(method, errors):
        return [TrialResult(method, "acc", 0, 0.0, 0.0, e, seed, seed, 20, 100) for seed, e in enumerate(errors)]

    def test_rmae(self):
        lab = self._results("labeled", [0.1, 0.3])
        assert rescaled_mae(lab, lab) == 1.0
        assert rescaled_mae(self._results("ssme", [0.05, 0.15]), lab) == pytest.approx(0.5)

    def test_rmae_matches_pairs_only(self):
        lab = self._results("labeled", [0.1, 0.3, 100.0])
        ssme = self._results("ssme", [0.1, 0.3])
        assert rescaled_mae(ssme, lab) == 1.0

    def test_rmae_degenerate(self):
        lab = self._results("labeled", [0.0, 0.0])
        with pytest.raises(ZeroDivisionError, match="degenerate rescaling"):
            rescaled_mae(self._results("ssme", [0.1, 0.2]), lab)


class TestEss:
    def curve(self):
        sizes = np.arange(10, 60, 5)
        return EssCurve(sizes, 1.0 / np.sqrt(sizes), runs=3)

    def test_exact_match(self):
        c = self.curve()
        assert effective_sample_size(1 / math.sqrt(25), c) == 25

    def test_below_curve(self):
        assert effective_sample_size(0.0, self.curve()) == 55

    def test_above_curve(self):
        assert effective_sample_size(5.0, self.curve()) == 10

    def test_tie_goes_larger(self):
        c = EssCurve([10, 15, 20], [0.3, 0.2, 0.1], runs=1)
        assert effective_sample_size(0.15, c) == 20

    def test_grid(self):
        assert len(ESS_SIZES) == 199 and ESS_SIZES[0] == 10 and ESS_SIZES[-1] == 1000

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            EssCurve([10, 10], [0.1, 0.2], runs=1)

    def test_self_consistency(self):
        pool = pool_of(1300, seed=3)
        reqs = requests_for(["acc"], 2)
        ep = ess_pool(pool, reqs, reserve=1000, seed=0)
        sizes = tuple(range(30, 71, 5))
        curve = ess_curve(ep, reqs, runs=20, seed=1, sizes=sizes)
        assert curve.truncated
        err = method_error_for_ess(ep, "labeled", reqs, 50, 0, runs=20, seed=1)
        assert err == pytest.approx(curve.mae[list(sizes).index(50)], abs=1e-15)
        assert effective_sample_size(err, curve) == 50

    def test_truncated_flag(self):
        pool = pool_of(200, seed=4)
        reqs = requests_for(["acc"], 2)
        ep = ess_pool(pool, reqs, reserve=100, seed=0)
        curve = ess_curve(ep, reqs, runs=2, seed=0)
        assert curve.truncated and curve.sizes[-1] <= 100


@pytest.fixture(scope="module")
def pool():
    return pool_of(400, seed=7, n_classifiers=3)


class TestTrials:
    reqs = requests_for(["acc", "ece", "auc", "auprc"], 3)

    def test_shape(self, pool):
        ts = run_trials(pool, ("labeled", "mv"), 20, 60, self.reqs, runs=5, master_seed=1)
        assert len(ts.results) + len(ts.failures) == 5 * 2 * 4 * 3
        for r in ts.results:
            assert r.abs_error == abs(r.estimate - r.truth)

    def test_single_trial_reproduces(self, pool):
        ts = run_trials(pool, ("labeled",), 20, 60, self.reqs, runs=4, master_seed=2)
        alone = run_single_trial(pool, ("labeled",), 20, 60, self.reqs, 2, 3)
        assert [r for r in ts.results if r.run == 3] == alone.results

    def test_threads_identical(self, pool):
        kw = dict(runs=4, master_seed=3, samples=10, fit_overrides={"max_epochs": 5})
        a = run_trials(pool, ("labeled", "ssme", "ds"), 20, 40, self.reqs, threads=1, **kw)
        b = run_trials(pool, ("labeled", "ssme", "ds"), 20, 40, self.reqs, threads=4, **kw)
        assert a.results == b.results and a.failures == b.failures

    def test_disjointness_enforced(self, pool):
        with pytest.raises(DatasetError):
            run_trials(pool, ("labeled",), 400, 0, self.reqs, runs=1)

    def test_failures_recorded(self, pool):
        ts = run_trials(pool, ("labeled", "pl"), 2, 10, requests_for(["auc"], 3), runs=3)
        assert len(ts.results) + len(ts.failures) == 3 * 2 * 3

    def test_unknown_method(self, pool):
        with pytest.raises(ValueError):
            run_trials(pool, ("nope",), 20, 20, self.reqs, runs=1)

    def test_summary(self, pool):
        ts = run_trials(pool, ("labeled", "mv"), 20, 60, self.reqs, runs=3, master_seed=4)
        rows = summarize_trials(ts)
        lab = [r for r in rows if r["method"] == "labeled"]
        assert all(r["rmae"] == 1.0 for r in lab)
        assert all("ci_half_width" in r for r in rows)

    def test_ground_truth_omits_undefined(self):
        pool = pool_of(30)
        one = pool.with_labels(np.ones(30, dtype=np.int64))
        truth = ground_truth(one, requests_for(["acc", "auc"], 2))
        assert (0, "acc") in truth and (0, "auc") not in truth


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("SSME_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("SSME_THREADS")
    assert resolve_threads(None) == 1
    with pytest.raises(ValueError):
        resolve_threads(0)


@pytest.fixture(scope="module")
def setup():
    groups = (["a"] * 10 + ["b"] * 10) + (["a"] * 50 + ["b"] * 30 + ["c"] * 20)
    ds, _ = make_binary_dataset(n_labeled=20, n_unlabeled=100, groups=groups, seed=9)
    return ds, fit(ds, FitConfig(max_epochs=30))


class TestSubgroup:
    def test_all_records_equal_overall(self, setup):
        ds, model = setup
        ds_all = EvaluationDataset(ds.profiles, ds.labels, ds.ids, ["x"] * len(ds))
        reqs = requests_for(["acc", "auc"], 2)
        a = subgroup_estimates(model, ds_all, "x", reqs, seed=2, samples=30)
        b = estimate_metrics(model, ds_all, reqs, seed=2, samples=30)
        assert a.to_dict()["estimates"] == b.to_dict()["estimates"]

    def test_members_partition(self, setup):
        ds, model = setup
        reqs = requests_for(["acc"], 2)
        counts = [subgroup_estimates(model, ds, g, reqs, samples=5).flags["n_members"] for g in "abc"]
        assert sum(counts) == len(ds)

    def test_empty_group(self, setup):
        ds, model = setup
        with pytest.raises(DatasetError, match="empty group"):
            subgroup_estimates(model, ds, "zzz", requests_for(["acc"], 2))
