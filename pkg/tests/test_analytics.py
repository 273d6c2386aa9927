import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import ks_exact, ou_joint_cov
from perpetuity.analytics import (LawKind, dufresne_oracle, empirical_law, gaussian_1d,
                                  inverse_gamma_candidate, ks_distance, ou_covariance,
                                  ou_reference_law, summary_stats)
from perpetuity.errors import OracleValidationError


class TestKS:
    def test_matches_scipy(self, rng):
        x = rng.standard_normal(3000)
        assert ks_distance(x, stats.norm.cdf).distance == pytest.approx(
            ks_exact(x, stats.norm.cdf), abs=1e-15)

    def test_single_sample_at_median(self):
        assert ks_distance([0.0], stats.norm.cdf).distance == 0.5

    def test_all_below_support(self):
        assert ks_distance([-1.0, -2.0], stats.expon.cdf).distance == 1.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ks_distance([], stats.norm.cdf)
        with pytest.raises(ValueError):
            ks_distance([0.0, np.nan], stats.norm.cdf)

    def test_own_sample_shrinks(self):
        g = np.random.default_rng(5)
        for n in (10**3, 10**4, 10**5):
            d = ks_distance(g.standard_normal(n), stats.norm.cdf).distance
            assert d <= 3 / np.sqrt(n)
        assert d <= 0.01

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 2**31))
    def test_affine_invariance(self, scale, shift, seed):
        x = np.random.default_rng(seed).standard_normal(200)
        base = ks_distance(x, stats.norm.cdf)
        moved = ks_distance(scale * x + shift, lambda y: stats.norm.cdf((y - shift) / scale))
        assert moved.distance == pytest.approx(base.distance, abs=1e-12)
        assert moved.argmax_point == pytest.approx(scale * base.argmax_point + shift, rel=1e-12,
                                                   abs=1e-12)

    def test_empirical_reference(self, rng):
        x = rng.standard_normal(100)
        assert ks_distance(x, empirical_law(x)).distance == pytest.approx(0.01, abs=1e-12)


class TestOULaw:
    def test_bench_parameters(self):
        np.testing.assert_allclose(ou_covariance(2.0, 1.0), [[1 / 4, 1 / 12], [1 / 12, 1 / 12]],
                                   rtol=1e-15)

    @pytest.mark.parametrize("gamma,a", [(0.5, 1.0), (2.0, 3.0), (7.0, 0.2)])
    def test_formula_and_marginal(self, gamma, a):
        law = ou_reference_law(gamma, a)
        np.testing.assert_allclose(law.cov, ou_joint_cov(gamma, a), rtol=1e-15)
        sd = np.sqrt(law.cov[1, 1])
        assert law.cdf(sd) == pytest.approx(stats.norm.cdf(1.0), rel=1e-14)
        assert law.kind is LawKind.GAUSSIAN_JOINT
        assert law.factor_cdf(0.0) == 0.5

    def test_unit_variance_at_half(self):
        assert ou_covariance(0.5, 1.0)[0, 0] == 1.0

    def test_positive_definite_on_grid(self):
        for g in np.geomspace(0.01, 100, 15):
            for a in np.geomspace(0.01, 100, 15):
                S = ou_covariance(g, a)
                assert S[0, 0] > 0 and np.linalg.det(S) > 0

    def test_correlation_formula(self):
        # Corr = sqrt(a / (a + gamma)) follows from the three entries
        for g, a in ((2.0, 1.0), (1.0, 3.0)):
            S = ou_covariance(g, a)
            corr = S[0, 1] / np.sqrt(S[0, 0] * S[1, 1])
            assert corr == pytest.approx(np.sqrt(a / (a + g)), rel=1e-14)

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            ou_reference_law(0.0, 1.0)
        with pytest.raises(ValueError):
            gaussian_1d(0.0, 0.0)
        with pytest.raises(ValueError):
            gaussian_1d(0.0, 1.0).factor_cdf(0.0)


class TestDufresne:
    def test_unit_parameters_validated(self):
        law = dufresne_oracle(1.0, 1.0)
        assert law.kind is LawKind.INVERSE_GAMMA
        assert law.validation["ks"] <= 0.02 and law.validation["n"] == 100_000
        assert law.params == {"shape": 2.0, "scale": 2.0}

    def test_small_sigma_is_nearly_deterministic(self):
        law = dufresne_oracle(1.0, 0.05)
        shape, scale = law.params["shape"], law.params["scale"]
        assert scale / (shape - 1) == pytest.approx(1.0, rel=0.01)
        assert law.validation["sample_mean"] == pytest.approx(1.0, rel=0.01)

    @pytest.mark.slow
    def test_heavy_tail_quantile(self):
        law = dufresne_oracle(0.1, 1.0)
        q95 = stats.invgamma(law.params["shape"], scale=law.params["scale"]).ppf(0.95)
        assert law.validation["sample_q95"] == pytest.approx(q95, rel=0.05)

    def test_wrong_candidate_refused(self, monkeypatch):
        import perpetuity.analytics as an
        an._validated.cache_clear()
        monkeypatch.setattr(an, "inverse_gamma_candidate", lambda nu, s: (2 * nu / s**2, 1.0))
        with pytest.raises(OracleValidationError):
            an.dufresne_oracle(1.0, 1.0, n_validation=5000, horizon=50.0)
        an._validated.cache_clear()

    def test_infinite_regime(self):
        with pytest.raises(ValueError):
            dufresne_oracle(-0.5, 1.0)
        with pytest.raises(ValueError):
            dufresne_oracle(1.0, 0.0)

    def test_candidate_time_change(self):
        assert inverse_gamma_candidate(1.0, 2.0) == (0.5, 0.5)


class TestSummary:
    def test_single(self):
        s = summary_stats([0.1])
        assert s.median_ks == 0.1 and s.std == 0.0

    def test_three(self):
        s = summary_stats([0.1, 0.2, 0.3], [1.0, 2.0, 4.0], "A")
        assert s.median_ks == 0.2 and s.median_seconds == 2.0
        assert s.std == pytest.approx(0.1)
        assert s.p99 == pytest.approx(0.298) and s.p01 == pytest.approx(0.102)
        assert set(s.as_dict()) == {"schema_version", "method", "median_ks", "std", "p99",
                                    "p01", "median_seconds", "n_trials"}

    def test_accepts_reports(self):
        r = ks_distance([0.0], stats.norm.cdf)
        assert summary_stats([r, r]).median_ks == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            summary_stats([])
