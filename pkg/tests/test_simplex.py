import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssme.simplex import alr, alr_inverse, clip_simplex, profile_to_score, score_to_profile


class TestClip:
    def test_interior_unchanged(self):
        np.testing.assert_array_equal(clip_simplex([0.5, 0.5]), [0.5, 0.5])

    def test_boundary_point(self):
        out = clip_simplex([1.0, 0.0], 1e-6)
        np.testing.assert_allclose(out, [1.0 / (1 + 1e-6), 1e-6 / (1 + 1e-6)], rtol=1e-15)
        np.testing.assert_allclose(out, [0.999999, 1e-6], atol=1e-11)

    def test_large_eps(self):
        np.testing.assert_allclose(clip_simplex([0.2, 0.8], 0.3), [0.3 / 1.1, 0.8 / 1.1], rtol=1e-15)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            clip_simplex([0.5, 0.5], 0.6)

    @given(st.integers(2, 10), st.integers(0, 2**32 - 1))
    def test_output_bounds(self, k, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(k, 0.2))
        out = clip_simplex(p, 1e-6)
        assert abs(out.sum() - 1.0) < 1e-12
        assert out.min() >= 1e-6 / (1 + k * 1e-6) * (1 - 1e-12)


class TestAlr:
    def test_uniform_binary(self):
        np.testing.assert_array_equal(alr([0.5, 0.5]), [0.0])

    def test_binary_value(self):
        np.testing.assert_allclose(alr([0.8, 0.2]), [math.log(4.0)], rtol=1e-15)
        assert alr([0.8, 0.2])[0] == pytest.approx(1.386294, abs=1e-6)

    @pytest.mark.parametrize("k", range(2, 11))
    def test_origin_law(self, k):
        np.testing.assert_allclose(alr(np.full(k, 1.0 / k)), np.zeros(k - 1), atol=1e-15)

    def test_zero_entry_rejected(self):
        with pytest.raises(ValueError, match="clip"):
            alr([1.0, 0.0])

    def test_monotone_binary(self):
        p = np.linspace(0.01, 0.99, 50)
        s = np.array([alr([q, 1 - q])[0] for q in p])
        assert np.all(np.diff(s) > 0)


class TestAlrInverse:
    def test_origin(self):
        np.testing.assert_allclose(alr_inverse([0.0]), [0.5, 0.5])

    def test_inverse_example(self):
        np.testing.assert_allclose(alr_inverse([1.386294]), [0.8, 0.2], atol=1e-6)

    def test_saturation_without_overflow(self):
        with np.errstate(all="raise"):
            out = alr_inverse([700.0])
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0, abs=1e-15)
        assert 0.0 <= out[1] < 1e-300

    @settings(max_examples=200)
    @given(st.integers(2, 10), st.integers(0, 2**32 - 1))
    def test_round_trip(self, k, seed):
        p = clip_simplex(np.random.default_rng(seed).dirichlet(np.full(k, 0.3)))
        np.testing.assert_allclose(alr_inverse(alr(p)), p, atol=1e-12)


class TestProfileScore:
    def test_concatenation(self):
        s = profile_to_score(np.array([[0.5, 0.5], [0.8, 0.2]]))
        np.testing.assert_allclose(s, [0.0, math.log(4.0)], atol=1e-12)

    def test_three_class_uniform(self):
        np.testing.assert_allclose(profile_to_score(np.full((1, 3), 1 / 3)), [0.0, 0.0], atol=1e-15)

    def test_batch_round_trip(self):
        rng = np.random.default_rng(3)
        prof = clip_simplex(rng.dirichlet(np.ones(4), size=(50, 3)))
        back = score_to_profile(profile_to_score(prof), 3, 4)
        np.testing.assert_allclose(back, prof, atol=1e-12)
        assert profile_to_score(prof).shape == (50, 9)
