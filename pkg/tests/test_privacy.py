import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dpfedsim as dp
from dpfedsim import streams
from dpfedsim.privacy import noise_stream

# ln(1e5) evaluated independently to high precision for the frozen values
LN_1E5 = 11.512925464970229


class TestClip:
    def test_below_threshold_unchanged(self):
        x = np.array([3.0, 4.0])
        out, flag = dp.clip(x, 10.0)
        assert np.array_equal(out, x)
        assert flag is False

    def test_scaled_to_threshold(self):
        x = np.array([3.0, 4.0])
        out, flag = dp.clip(x, 1.0)
        assert flag is True
        assert np.allclose(out, [0.6, 0.8], rtol=1e-15)
        assert math.isclose(np.linalg.norm(out), 1.0, rel_tol=1e-15)

    def test_zero_vector_fixed_point(self):
        out, flag = dp.clip(np.zeros(4), 0.1)
        assert np.array_equal(out, np.zeros(4))
        assert flag is False

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            dp.clip(np.ones(2), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(
        vec=st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=8),
        threshold=st.floats(min_value=1e-6, max_value=1e6),
    )
    def test_norm_never_exceeds_threshold(self, vec, threshold):
        from dpfedsim._backend import impl

        out, _ = dp.clip(np.array(vec), threshold)
        assert math.sqrt(impl.sq_norm(out)) <= threshold

    @settings(max_examples=100, deadline=None)
    @given(
        vec=st.lists(
            st.floats(min_value=-1e3, max_value=1e3), min_size=2, max_size=6
        ),
        threshold=st.floats(min_value=1e-3, max_value=1e3),
    )
    def test_idempotent_bitwise(self, vec, threshold):
        once, _ = dp.clip(np.array(vec), threshold)
        twice, flag = dp.clip(once, threshold)
        assert np.array_equal(once, twice)
        assert flag is False or np.linalg.norm(once) > threshold

    @settings(max_examples=100, deadline=None)
    @given(
        vec=st.lists(st.floats(min_value=-100.0, max_value=100.0), min_size=2, max_size=5),
        threshold=st.floats(min_value=0.01, max_value=10.0),
        alpha=st.floats(min_value=1e-3, max_value=1e3),
    )
    def test_scale_covariance(self, vec, threshold, alpha):
        x = np.array(vec)
        a, _ = dp.clip(alpha * x, alpha * threshold)
        b, _ = dp.clip(x, threshold)
        assert np.allclose(a, alpha * b, rtol=1e-12, atol=1e-12)


class TestCalibration:
    def test_paper_setup_constants(self):
        budget = dp.PrivacyBudget(epsilon=1.0, delta=1e-5)
        sigma2 = dp.calibrate_sigma2(budget, 0.1, 1.0, 500, 2.0)
        # 2 * 0.01 * 500 * ln(1e5) evaluated independently
        assert math.isclose(sigma2, 10.0 * LN_1E5, rel_tol=1e-12)

    def test_linear_in_rounds(self):
        budget = dp.PrivacyBudget(1.0, 1e-5)
        a = dp.calibrate_sigma2(budget, 0.1, 0.5, 250)
        b = dp.calibrate_sigma2(budget, 0.1, 0.5, 500)
        assert math.isclose(b, 2 * a, rel_tol=1e-12)

    def test_quarter_at_double_epsilon(self):
        s1 = dp.calibrate_sigma2(dp.PrivacyBudget(1.0, 1e-5), 0.1, 1.0, 500)
        s2 = dp.calibrate_sigma2(dp.PrivacyBudget(2.0, 1e-5), 0.1, 1.0, 500)
        assert math.isclose(s2, s1 / 4, rel_tol=1e-12)
        assert math.isclose(s2, 10.0 * LN_1E5 / 4, rel_tol=1e-12)

    def test_recovering_v_exactly(self):
        budget = dp.PrivacyBudget(0.7, 1e-6)
        c, p, t, v = 0.35, 0.42, 137, 1.75
        sigma2 = dp.calibrate_sigma2(budget, c, p, t, v)
        recovered = sigma2 * budget.epsilon**2 / (c * c * p * t * math.log(1 / budget.delta))
        assert math.isclose(recovered, v, rel_tol=1e-14)

    def test_invalid_inputs(self):
        budget = dp.PrivacyBudget(1.0, 1e-5)
        with pytest.raises(ValueError):
            dp.PrivacyBudget(1.0, 1.0)  # delta >= 1 breaks ln(1/delta)
        with pytest.raises(ValueError):
            dp.PrivacyBudget(0.0, 1e-5)
        with pytest.raises(ValueError):
            dp.calibrate_sigma2(budget, 0.0, 1.0, 10)
        with pytest.raises(ValueError):
            dp.calibrate_sigma2(budget, 0.1, 1.5, 10)
        with pytest.raises(ValueError):
            dp.calibrate_sigma2(budget, 0.1, 1.0, 0)

    @settings(max_examples=200, deadline=None)
    @given(
        eps=st.floats(min_value=0.01, max_value=50.0),
        delta=st.floats(min_value=1e-12, max_value=0.5),
        c=st.floats(min_value=1e-3, max_value=100.0),
        p=st.floats(min_value=0.01, max_value=1.0),
        t=st.integers(min_value=1, max_value=10_000),
        v=st.floats(min_value=0.1, max_value=10.0),
    )
    def test_monotonicity(self, eps, delta, c, p, t, v):
        budget = dp.PrivacyBudget(eps, delta)
        base = dp.calibrate_sigma2(budget, c, p, t, v)
        assert dp.calibrate_sigma2(budget, c, p, t + 1, v) >= base
        assert dp.calibrate_sigma2(budget, c * 1.1, p, t, v) >= base
        assert dp.calibrate_sigma2(budget, c, p, t, v * 1.1) >= base
        assert dp.calibrate_sigma2(dp.PrivacyBudget(eps * 1.1, delta), c, p, t, v) <= base
        if p * 1.1 <= 1.0:
            assert dp.calibrate_sigma2(budget, c, p * 1.1, t, v) >= base


class TestEpsilonRegime:
    def test_inside_regime(self):
        assert dp.check_epsilon_regime(dp.PrivacyBudget(1.0, 1e-5), 1.0, 1.0, 500) == "ok"

    def test_outside_regime_warns(self, caplog):
        with caplog.at_level("WARNING"):
            out = dp.check_epsilon_regime(dp.PrivacyBudget(1.0, 1e-5), 0.001, 0.1, 10)
        assert out == "warning"
        assert any("regime" in m for m in caplog.messages)

    def test_disabled_check(self):
        assert dp.check_epsilon_regime(dp.PrivacyBudget(100.0, 1e-5), None, 0.1, 1) == "ok"


class TestGaussianNoise:
    def test_zero_variance_gives_zero_vector(self):
        out = dp.gaussian_noise(8, 0.0, noise_stream(1, 0, 0))
        assert np.array_equal(out, np.zeros(8))

    def test_same_stream_identical(self):
        key = noise_stream(42, 2, 17)
        assert np.array_equal(dp.gaussian_noise(6, 2.5, key), dp.gaussian_noise(6, 2.5, key))

    def test_sample_variance(self):
        # expected sampling error of the variance estimate at n=1e6 draws is
        # sqrt(2/n)*sigma2 ~ 0.006, so [3.97, 4.03] is a generous window
        chunks = [
            dp.gaussian_noise(10_000, 4.0, noise_stream(9, 0, t)) for t in range(100)
        ]
        draws = np.concatenate(chunks)
        assert 3.97 <= draws.var() <= 4.03
        assert abs(draws.mean()) < 0.01

    def test_matches_engine_noise_streams(self):
        # the round engines draw from the same keyed streams
        sigma2 = 2.25
        expected = streams.normals(noise_stream(5, 1, 3), 4) * math.sqrt(sigma2)
        assert np.array_equal(dp.gaussian_noise(4, sigma2, noise_stream(5, 1, 3)), expected)

    def test_mechanism_params_validation(self):
        with pytest.raises(ValueError):
            dp.MechanismParams(clip_threshold=0.0)
        with pytest.raises(ValueError):
            dp.MechanismParams(clip_threshold=1.0, v=0.0)
        with pytest.raises(ValueError):
            dp.MechanismParams(clip_threshold=1.0, sigma2=-1.0)
        with pytest.raises(ValueError):
            dp.MechanismParams(clip_threshold=1.0, u=0.0)
