import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svflow.geometry import (DegenerateNormError, exp_map, loglog_slope, random_unit,
                             relaxed_retraction_residual, retract, rms_normalize, tangent_project)

seeds = st.integers(0, 2**32 - 1)
dims = st.integers(2, 32)


class TestTangentProjection:
    @given(seeds, dims)
    def test_result_is_orthogonal_to_base_point(self, seed, d):
        rng = np.random.default_rng(seed)
        x = random_unit(rng, d)
        v = tangent_project(x, 3.0 * rng.standard_normal(d))
        assert abs(x @ v) <= 1e-12 * max(1.0, np.linalg.norm(v))

    def test_idempotent(self, rng):
        x = random_unit(rng, 5)
        v = tangent_project(x, rng.standard_normal(5))
        np.testing.assert_allclose(tangent_project(x, v), v, atol=1e-15)

    def test_rejects_off_sphere_point(self):
        with pytest.raises(ValueError, match="unit sphere"):
            tangent_project(np.array([1.0, 1.0]), np.array([0.0, 1.0]))


class TestExpMap:
    @given(seeds, dims, st.floats(0.0, 3.0))
    def test_stays_on_sphere_and_travels_arc_length(self, seed, d, length):
        rng = np.random.default_rng(seed)
        x = random_unit(rng, d)
        v = tangent_project(x, rng.standard_normal(d))
        v *= length / max(np.linalg.norm(v), 1e-300)
        y = exp_map(x, v)
        assert abs(np.linalg.norm(y) - 1.0) <= 1e-14
        if np.linalg.norm(v) > 1e-6:
            np.testing.assert_allclose(np.arccos(np.clip(x @ y, -1, 1)), np.linalg.norm(v), atol=1e-7)

    def test_zero_step_returns_base_point(self, rng):
        x = random_unit(rng, 4)
        np.testing.assert_array_equal(exp_map(x, np.zeros(4)), x)

    def test_rejects_non_tangent(self):
        with pytest.raises(ValueError, match="tangent"):
            exp_map(np.array([1.0, 0.0]), np.array([0.5, 0.5]))

    def test_quarter_circle(self):
        np.testing.assert_allclose(exp_map(np.array([1.0, 0.0]), np.array([0.0, np.pi / 2])), [0.0, 1.0],
                                   atol=1e-15)


class TestRetract:
    @given(seeds, dims)
    def test_unit_norm(self, seed, d):
        rng = np.random.default_rng(seed)
        x = random_unit(rng, d)
        v = tangent_project(x, rng.standard_normal(d))
        assert abs(np.linalg.norm(retract(x, v)) - 1.0) <= 1e-14

    def test_degenerate_sum_raises(self):
        x = np.array([1.0, 0.0])
        with pytest.raises(DegenerateNormError):
            retract(x, -x, check_tangent=False)

    def test_agrees_with_exp_map_to_second_order(self, rng):
        x = random_unit(rng, 6)
        u = tangent_project(x, rng.standard_normal(6))
        u /= np.linalg.norm(u)
        scales = np.logspace(-3, -1, 5)
        gaps = np.array([np.linalg.norm(retract(x, s * u) - exp_map(x, s * u)) for s in scales])
        # the gap is |v|^3 / 3 on the sphere, so gap / |v|^2 shrinks with |v|
        assert np.all(np.diff(gaps / scales**2) > 0)
        np.testing.assert_allclose(gaps / scales**3, 1.0 / 3.0, rtol=1e-2)
        assert 2.9 <= loglog_slope(scales, gaps) <= 3.1


class TestRmsNormalize:
    @given(seeds, dims, st.floats(1e-3, 1e3))
    def test_radius_and_scale_invariance(self, seed, d, c):
        x = np.random.default_rng(seed).standard_normal(d)
        y = rms_normalize(x)
        np.testing.assert_allclose(np.linalg.norm(y), np.sqrt(d), rtol=1e-14)
        np.testing.assert_allclose(rms_normalize(c * x), y, rtol=1e-13, atol=1e-15)

    def test_batched(self, rng):
        X = rng.standard_normal((3, 4, 8))
        np.testing.assert_allclose(np.linalg.norm(rms_normalize(X), axis=-1), np.sqrt(8), rtol=1e-14)

    def test_zero_vector_raises(self):
        with pytest.raises(DegenerateNormError):
            rms_normalize(np.zeros(3))


class TestRelaxedRetraction:
    def test_residual_is_second_order(self, rng):
        x = random_unit(rng, 16)
        v = random_unit(rng, 16)
        scales = np.logspace(-5, -1, 9)
        res = [relaxed_retraction_residual(x, s * v) for s in scales]
        assert 1.9 <= loglog_slope(scales, res) <= 2.1

    def test_tangent_step_has_no_residual(self, rng):
        x = random_unit(rng, 8)
        v = tangent_project(x, 0.3 * rng.standard_normal(8))
        assert relaxed_retraction_residual(x, v) <= 1e-15


def test_loglog_slope_recovers_power():
    s = np.logspace(-3, 0, 7)
    assert loglog_slope(s, 5.0 * s**2.5) == pytest.approx(2.5, abs=1e-12)
