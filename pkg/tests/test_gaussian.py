import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrdose import design, gaussian
from ssrdose.errors import DomainError, NumericError, UnsupportedDimensionError
from ssrdose.gaussian import MvnSpec, QmcConfig

CFG = gaussian.DEFAULT_QMC

# frozen from the 40-digit erf-series oracle in oracles.py
ORACLE_CDF_12816 = 0.90000849990232485
ORACLE_Q90 = 1.2815515655446005
ORACLE_Q80 = 0.84162123357291421


def four_contrast_corr():
    doses = np.arange(5.0)
    phi = np.full(5, 0.2)
    shapes = [
        design.shape_profile("linear", doses),
        design.shape_profile("emax", doses, ed50=0.3),
        design.shape_profile("exponential", doses, delta=0.3),
        design.shape_profile("sigmoid_emax", doses, ed50=1, h=3),
    ]
    C = np.array([design.optimal_contrast(s, phi) for s in shapes])
    return design.combined_null_cov(C, 70, phi, 100, phi)


def random_corr(m, rng):
    A = rng.normal(size=(m, m + 1))
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


class TestUnivariate:
    def test_cdf_values(self):
        assert gaussian.norm_cdf(0.0) == 0.5
        assert gaussian.norm_cdf(1.2816) == pytest.approx(0.90, abs=1e-4)
        assert gaussian.norm_cdf(1.2816) == pytest.approx(ORACLE_CDF_12816, abs=1e-12)

    def test_cdf_matches_series_oracle_live(self):
        for x in (-6.0, -1.5, -0.3, 0.7, 2.5, 5.0):
            assert gaussian.norm_cdf(x) == pytest.approx(oracles.norm_cdf(x), abs=1e-12)

    def test_quantile_values(self):
        assert gaussian.norm_quantile(0.5) == 0.0
        assert gaussian.norm_quantile(0.9) == pytest.approx(ORACLE_Q90, abs=1e-12)
        assert gaussian.norm_quantile(0.8) == pytest.approx(ORACLE_Q80, abs=1e-12)
        assert gaussian.norm_quantile(0.9) == pytest.approx(1.2816, abs=1e-4)
        assert gaussian.norm_quantile(0.8) == pytest.approx(0.8416, abs=1e-4)

    @given(st.floats(-30, 30))
    def test_symmetry(self, x):
        assert abs(gaussian.norm_cdf(x) + gaussian.norm_cdf(-x) - 1.0) <= 1e-15

    @given(st.floats(1e-12, 1 - 1e-12))
    def test_round_trip(self, p):
        assert gaussian.norm_cdf(gaussian.norm_quantile(p)) == pytest.approx(p, abs=1e-10)

    @given(st.floats(-20, 20), st.floats(0, 5))
    def test_monotone(self, x, h):
        assert gaussian.norm_cdf(x + h) >= gaussian.norm_cdf(x)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_cdf_rejects_non_finite(self, bad):
        with pytest.raises(DomainError):
            gaussian.norm_cdf(bad)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5, math.nan])
    def test_quantile_domain(self, bad):
        with pytest.raises(DomainError):
            gaussian.norm_quantile(bad)


class TestConfigAndSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(abs_tol=0.0), dict(sample_budget=64), dict(randomizations=3), dict(seed=-1), dict(seed=2**64)],
    )
    def test_config_invariants(self, kwargs):
        with pytest.raises(DomainError):
            QmcConfig(**kwargs)

    def test_asymmetric_cov_rejected(self):
        with pytest.raises(NumericError):
            MvnSpec(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))

    def test_indefinite_cov_rejected(self):
        with pytest.raises(NumericError):
            MvnSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            MvnSpec(np.zeros(3), np.eye(2))

    def test_dimension_cap(self):
        with pytest.raises(UnsupportedDimensionError):
            MvnSpec(np.zeros(17), np.eye(17))


class TestOrthant:
    def test_one_dimension(self):
        r = gaussian.mvn_upper_orthant_cdf(MvnSpec([0.0], [[1.0]]), [1.2816], CFG)
        assert r.estimate == pytest.approx(0.90, abs=CFG.abs_tol)

    def test_one_dimension_shifted(self):
        spec = MvnSpec([0.5], [[4.0]])
        r = gaussian.mvn_equicoordinate_cdf(spec, 1.3, CFG)
        assert r.estimate == pytest.approx(gaussian.norm_cdf((1.3 - 0.5) / 2.0), abs=1e-12)

    def test_independent_product(self):
        r = gaussian.mvn_upper_orthant_cdf(MvnSpec(np.zeros(3), np.eye(3)), np.zeros(3), CFG)
        assert r.estimate == pytest.approx(0.125, abs=CFG.abs_tol)

    def test_uncorrelated_pair(self):
        r = gaussian.mvn_equicoordinate_cdf(MvnSpec(np.zeros(2), np.eye(2)), 0.0, CFG)
        assert r.estimate == pytest.approx(0.25, abs=CFG.abs_tol)

    def test_perfectly_correlated_pair(self):
        r = gaussian.mvn_equicoordinate_cdf(MvnSpec(np.zeros(2), np.ones((2, 2))), 0.0, CFG)
        assert r.estimate == pytest.approx(0.5, abs=CFG.abs_tol)

    def test_anti_correlated_pair(self):
        cov = np.array([[1.0, -1.0], [-1.0, 1.0]])
        r = gaussian.mvn_equicoordinate_cdf(MvnSpec(np.zeros(2), cov), 0.5, CFG)
        assert r.estimate == pytest.approx(2 * gaussian.norm_cdf(0.5) - 1, abs=CFG.abs_tol)

    def test_zero_variance_coordinate(self):
        cov = np.diag([1.0, 0.0, 1.0])
        inside = gaussian.mvn_upper_orthant_cdf(MvnSpec([0.0, 0.3, 0.0], cov), [0.0, 0.5, 0.0], CFG)
        outside = gaussian.mvn_upper_orthant_cdf(MvnSpec([0.0, 0.7, 0.0], cov), [0.0, 0.5, 0.0], CFG)
        assert inside.estimate == pytest.approx(0.25, abs=CFG.abs_tol)
        assert outside.estimate == 0.0

    def test_diagonal_factorizes(self):
        rng = np.random.default_rng(11)
        for m in (2, 4, 7):
            var = rng.uniform(0.3, 3.0, m)
            mean = rng.normal(size=m)
            upper = rng.normal(size=m) + 1.0
            r = gaussian.mvn_upper_orthant_cdf(MvnSpec(mean, np.diag(var)), upper, CFG)
            exact = np.prod([gaussian.norm_cdf((u - mu) / math.sqrt(v)) for u, mu, v in zip(upper, mean, var)])
            assert abs(r.estimate - exact) <= 3 * r.std_error + 1e-12

    def test_four_contrast_correlation_against_mc(self):
        cov = four_contrast_corr()
        r = gaussian.mvn_equicoordinate_cdf(MvnSpec(np.zeros(4), cov), 1.9, CFG)
        mc, mc_se = oracles.mc_orthant(np.zeros(4), cov, np.full(4, 1.9), seed=3)
        assert abs(r.estimate - mc) <= 3 * math.hypot(r.std_error, mc_se)

    @pytest.mark.parametrize("case", range(20))
    def test_random_specs_against_mc(self, case):
        rng = np.random.default_rng(1000 + case)
        m = (2, 3, 4, 8)[case % 4]
        scale = rng.uniform(0.5, 2.0, m)
        cov = random_corr(m, rng) * np.outer(scale, scale)
        mean = rng.normal(scale=0.5, size=m)
        upper = rng.normal(size=m) + 0.8
        r = gaussian.mvn_upper_orthant_cdf(MvnSpec(mean, cov), upper, CFG)
        mc, mc_se = oracles.mc_orthant(mean, cov, upper, seed=case)
        assert abs(r.estimate - mc) <= 3 * math.hypot(r.std_error, mc_se)

    def test_seed_determinism(self):
        spec = MvnSpec(np.zeros(4), four_contrast_corr())
        a = gaussian.mvn_equicoordinate_cdf(spec, 1.4, CFG)
        b = gaussian.mvn_equicoordinate_cdf(spec, 1.4, CFG)
        assert a == b

    def test_batch_rows_independent_of_batch(self):
        cov = four_contrast_corr()
        rng = np.random.default_rng(5)
        means = rng.normal(size=(6, 4))
        full, _ = gaussian.mvn_orthant_cdf_many(means, cov, 1.5, CFG)
        part, _ = gaussian.mvn_orthant_cdf_many(means[2:4], cov, 1.5, CFG)
        assert np.array_equal(full[2:4], part)
        single = gaussian.mvn_equicoordinate_cdf(MvnSpec(means[3], cov), 1.5, CFG)
        assert single.estimate == full[3]

    def test_monotone_in_threshold(self):
        spec = MvnSpec(np.zeros(4), four_contrast_corr())
        values = [gaussian.mvn_equicoordinate_cdf(spec, u, CFG).estimate for u in np.linspace(-2, 3.5, 50)]
        assert np.all(np.diff(values) >= 0)

    def test_infinite_limits(self):
        spec = MvnSpec(np.zeros(2), np.eye(2))
        assert gaussian.mvn_upper_orthant_cdf(spec, [np.inf, np.inf], CFG).estimate == 1.0
        assert gaussian.mvn_upper_orthant_cdf(spec, [0.0, -np.inf], CFG).estimate == 0.0
        assert gaussian.mvn_upper_orthant_cdf(spec, [0.0, np.inf], CFG).estimate == pytest.approx(0.5)


class TestQuantile:
    def test_univariate(self):
        u = gaussian.mvn_equicoordinate_quantile(MvnSpec([0.0], [[1.0]]), 0.9, CFG)
        assert u == pytest.approx(1.2816, abs=1e-3)

    def test_degenerate_pair(self):
        u = gaussian.mvn_equicoordinate_quantile(MvnSpec(np.zeros(2), np.ones((2, 2))), 0.9, CFG)
        assert u == pytest.approx(1.2816, abs=1e-3)

    def test_four_contrast_stable_across_seeds(self):
        spec = MvnSpec(np.zeros(4), four_contrast_corr())
        us = [gaussian.mvn_equicoordinate_quantile(spec, 0.9, QmcConfig(seed=s)) for s in (1, 2, 3, 4, 5)]
        assert max(us) - min(us) <= 2e-3
        u = float(np.mean(us))
        assert u > 1.2816
        p, se = oracles.mc_orthant(np.zeros(4), spec.cov, np.full(4, u), seed=9)
        assert abs(p - 0.9) <= 3 * se + CFG.abs_tol

    @pytest.mark.parametrize("p", [0.8, 0.9, 0.95])
    def test_round_trip(self, p):
        spec = MvnSpec(np.zeros(4), four_contrast_corr())
        u = gaussian.mvn_equicoordinate_quantile(spec, p, CFG)
        assert gaussian.mvn_equicoordinate_cdf(spec, u, CFG).estimate == pytest.approx(p, abs=2 * CFG.abs_tol)

    def test_level_validated(self):
        with pytest.raises(DomainError):
            gaussian.mvn_equicoordinate_quantile(MvnSpec([0.0], [[1.0]]), 1.0, CFG)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(-1.0, 2.0))
def test_property_marginal_and_union_bounds(m, seed, u):
    # the joint probability never exceeds the smallest marginal nor drops
    # below the Bonferroni lower bound
    rng = np.random.default_rng(seed)
    cov = random_corr(m, rng)
    r = gaussian.mvn_equicoordinate_cdf(MvnSpec(np.zeros(m), cov), u, CFG)
    marg = gaussian.norm_cdf(u)
    assert r.estimate <= marg + 3 * r.std_error + 1e-9
    assert r.estimate >= 1 - m * (1 - marg) - 3 * r.std_error - 1e-9
