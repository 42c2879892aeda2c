import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrdose import bayespower as bp
from ssrdose import design, freqpower, gaussian
from ssrdose.errors import CurvatureError, InsufficientSamplesError, ValidationError
from ssrdose.freqpower import FAVORABLE, PROMISING, UNFAVORABLE, InterimState

DOSES = np.arange(5.0)
EQUAL = np.full(5, 0.2)
UNDER = np.array([0, 0.2, 0.4, 0.6, 0.8])
LINEAR_C = np.array([-2, -1, 0, 1, 2]) / math.sqrt(10)
CFG = gaussian.DEFAULT_QMC


def single_design(n1=60, n2=90):
    return design.TwoStageDesign(DOSES, 2.0, EQUAL, EQUAL, n1, n2, LINEAR_C, 0.1, 0.2, n2 + 80, 0.3)


def multi_design():
    shapes = [
        design.shape_profile("linear", DOSES),
        design.shape_profile("emax", DOSES, ed50=0.3),
        design.shape_profile("exponential", DOSES, delta=0.3),
        design.shape_profile("sigmoid_emax", DOSES, ed50=1, h=3),
    ]
    C = np.array([design.optimal_contrast(s, EQUAL) for s in shapes])
    return design.TwoStageDesign(DOSES, 2.0, EQUAL, EQUAL, 70, 100, C, 0.1, 0.2, 195, 0.3)


@pytest.fixture(scope="module")
def mdesign():
    return multi_design()


@pytest.fixture(scope="module")
def u_alpha(mdesign):
    return mdesign.critical_value(CFG)


def random_state(d, rng, spread=0.6):
    return InterimState.from_means(UNDER + spread * rng.normal(size=5), d)


def pp_reference(post, n2, interim, d):
    """Predictive power written out directly from the predictive law of T2."""
    c = d.contrasts[0]
    w1, w2 = d.w1[0], d.w2[0]
    s2 = float(np.sum(c**2 / d.phi2))
    m = c @ post.mean
    v = c @ post.cov @ c
    # T2 | data ~ N(sqrt(n2) m / (sigma sqrt(s2)), 1 + n2 v / (sigma^2 s2))
    t2_mean = math.sqrt(n2) * m / (d.sigma * math.sqrt(s2))
    t2_var = 1 + n2 * v / (d.sigma**2 * s2)
    need = (d.z_alpha * math.sqrt(w1 + w2) - math.sqrt(w1) * interim.t1[0]) / math.sqrt(w2)
    return 1 - oracles.norm_cdf((need - t2_mean) / math.sqrt(t2_var))


class TestPosterior:
    def test_conjugate_variance_example(self):
        d = single_design()
        post = bp.posterior(bp.ConjugatePrior(np.zeros(5), 5.0), InterimState.from_means(UNDER, d), 2.0)
        assert np.allclose(np.diag(post.cov), 0.125)
        assert np.allclose(post.mean, UNDER * 3 / 8)

    def test_flat(self):
        d = single_design()
        post = bp.posterior(bp.FlatPrior(), InterimState.from_means(UNDER, d), 2.0)
        assert np.allclose(post.mean, UNDER)
        assert np.allclose(np.diag(post.cov), 4 / 12)

    def test_precision_limits(self):
        d = single_design()
        st1 = InterimState.from_means(UNDER, d)
        mu0 = np.array([0.1, -0.2, 0.3, 0.0, 0.5])
        tight = bp.posterior(bp.ConjugatePrior(mu0, 1e10), st1, 2.0)
        loose = bp.posterior(bp.ConjugatePrior(mu0, 1e-12), st1, 2.0)
        flat = bp.posterior(bp.FlatPrior(), st1, 2.0)
        assert np.allclose(tight.mean, mu0, atol=1e-9)
        assert np.allclose(loose.mean, flat.mean, atol=1e-11)
        assert np.allclose(loose.cov, flat.cov, atol=1e-11)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 100))
    def test_mean_between_prior_and_data(self, mu0, ybar, tau0):
        d = single_design()
        post = bp.posterior(bp.ConjugatePrior(np.full(5, mu0), tau0), InterimState.from_means(np.full(5, ybar), d), 2.0)
        lo, hi = min(mu0, ybar), max(mu0, ybar)
        assert np.all(post.mean >= lo - 1e-12) and np.all(post.mean <= hi + 1e-12)

    def test_bad_prior(self):
        with pytest.raises(ValidationError):
            bp.ConjugatePrior(np.zeros(5), 0.0)
        d = single_design()
        with pytest.raises(ValidationError):
            bp.posterior(bp.ConjugatePrior(np.zeros(4), 1.0), InterimState.from_means(UNDER, d), 2.0)

    def test_laplace_exact_for_gaussian_prior(self):
        d = single_design()
        rng = np.random.default_rng(1)
        for _ in range(10):
            mu0, tau0 = rng.normal(size=5), rng.uniform(0.2, 8, size=5)
            prior = bp.ConjugatePrior(mu0, tau0)
            st1 = random_state(d, rng)
            exact = bp.posterior(prior, st1, 2.0)
            approx = bp.posterior(bp.GeneralPrior(prior.log_density), st1, 2.0)
            assert np.allclose(approx.mean, exact.mean, atol=1e-8)
            assert np.allclose(approx.cov, exact.cov, atol=1e-7)

    def test_laplace_rejects_nonconcave_mode(self):
        d = single_design()

        def wild(mu):
            # strongly convex log density overwhelms the likelihood curvature
            return float(5.0 * np.sum(mu**2))

        with pytest.raises(CurvatureError):
            bp.posterior(bp.GeneralPrior(wild), InterimState.from_means(np.zeros(5), d), 2.0)

    def test_laplace_against_metropolis(self):
        # heavy-tailed prior; with a large first stage the posterior is nearly normal
        d = single_design(600, 900)
        st1 = InterimState.from_means(UNDER, d)

        def log_t(mu):
            return float(-2.5 * np.sum(np.log1p((mu - 0.2) ** 2 / 4 / 0.25)))

        post = bp.posterior(bp.GeneralPrior(log_t), st1, 2.0)
        prec = 600 * EQUAL / 4

        def log_post(mu):
            return log_t(mu) - 0.5 * np.sum(prec * (UNDER - mu) ** 2)

        draws = oracles.metropolis(log_post, UNDER, np.sqrt(1 / prec), 20_000, seed=3)
        assert np.allclose(draws.mean(axis=0), post.mean, atol=0.01)
        assert np.allclose(np.cov(draws.T), post.cov, atol=0.003)
        # predictive power over the MCMC draws agrees with the Laplace closed form
        est = bp.pp_monte_carlo(draws, 300, st1, d)
        assert est.estimate == pytest.approx(bp.pp_closed_form_single(post, 300, st1, d), abs=0.01)


class TestSinglePredictivePower:
    def test_matches_direct_formula(self):
        d = single_design()
        rng = np.random.default_rng(7)
        for _ in range(20):
            st1 = random_state(d, rng)
            prior = bp.ConjugatePrior(rng.normal(size=5), rng.uniform(0.1, 10))
            post = bp.posterior(prior, st1, 2.0)
            n2 = rng.uniform(1, 170)
            assert bp.pp_closed_form_single(post, n2, st1, d) == pytest.approx(pp_reference(post, n2, st1, d), abs=1e-12)

    def test_tight_prior_recovers_cp(self):
        d = single_design()
        st1 = InterimState.from_means(UNDER, d)
        mu0 = np.array([0, 0.25, 0.5, 0.75, 1.0])
        post = bp.posterior(bp.ConjugatePrior(mu0, 1e10), st1, 2.0)
        cp = freqpower.conditional_power_single(110, LINEAR_C @ mu0, st1, d)
        assert bp.pp_closed_form_single(post, 110, st1, d) == pytest.approx(cp, abs=1e-6)

    @settings(max_examples=60)
    @given(st.floats(-0.5, 1.5), st.floats(1, 300))
    def test_closer_to_half_than_cp(self, shift, n2):
        d = single_design()
        st1 = InterimState.from_means(UNDER * shift, d)
        post = bp.posterior(bp.FlatPrior(), st1, 2.0)
        pp = bp.pp_closed_form_single(post, n2, st1, d)
        cp = freqpower.conditional_power_single(n2, LINEAR_C @ post.mean, st1, d)
        assert abs(pp - 0.5) <= abs(cp - 0.5) + 1e-12

    def test_zero_limit(self):
        d = single_design()
        rng = np.random.default_rng(8)
        for _ in range(10):
            st1 = random_state(d, rng)
            post = bp.posterior(bp.FlatPrior(), st1, 2.0)
            assert bp.pp_closed_form_single(post, 1e-12, st1, d) == pytest.approx(bp.pp_at_zero(post, st1, d), abs=1e-6)

    @pytest.mark.parametrize("case", range(6))
    def test_against_predictive_simulation(self, case):
        d = single_design(*((60, 90), (105, 45))[case % 2])
        rng = np.random.default_rng(90 + case)
        st1 = random_state(d, rng)
        prior = bp.FlatPrior() if case < 3 else bp.ConjugatePrior(rng.normal(0.3, 0.3, 5), 5.0)
        post = bp.posterior(prior, st1, 2.0)
        n2 = rng.uniform(d.n2, d.n_max)
        pp = bp.pp_closed_form_single(post, n2, st1, d)
        p, se = oracles.predictive_rejection(post.mean, post.cov, 2.0, n2, EQUAL, LINEAR_C, d.n1, EQUAL,
                                             st1.t1, d.n2, d.z_alpha, seed=case)
        assert abs(pp - p) <= 3 * se

    def test_monte_carlo_with_exact_draws(self):
        d = single_design()
        rng = np.random.default_rng(11)
        for case in range(6):
            st1 = random_state(d, rng)
            post = bp.posterior(bp.ConjugatePrior(np.zeros(5), 5.0) if case % 2 else bp.FlatPrior(), st1, 2.0)
            draws = post.sample(100_000, np.random.default_rng(case))
            est = bp.pp_monte_carlo(draws, 120, st1, d)
            assert abs(est.estimate - bp.pp_closed_form_single(post, 120, st1, d)) <= 3 * est.std_error

    def test_too_few_draws(self):
        d = single_design()
        st1 = InterimState.from_means(UNDER, d)
        with pytest.raises(InsufficientSamplesError):
            bp.pp_monte_carlo(np.zeros((99, 5)), 100, st1, d)


class TestMultiPredictivePower:
    def test_single_row_reduces(self):
        d = single_design()
        st1 = InterimState.from_means(UNDER, d)
        post = bp.posterior(bp.FlatPrior(), st1, 2.0)
        single = bp.pp_closed_form_single(post, 100, st1, d)
        multi = bp.pp_closed_form_multi(post, 100, st1, d, d.z_alpha, CFG)
        assert multi == pytest.approx(single, abs=2 * CFG.abs_tol)

    def test_batched_sizes(self, mdesign, u_alpha):
        st1 = InterimState.from_means(UNDER, mdesign)
        post = bp.posterior(bp.FlatPrior(), st1, 2.0)
        sizes = np.array([50.0, 100.0, 150.0])
        batch = bp.pp_closed_form_multi(post, sizes, st1, mdesign, u_alpha, CFG)
        for n, b in zip(sizes, batch):
            assert b == pytest.approx(bp.pp_closed_form_multi(post, n, st1, mdesign, u_alpha, CFG), abs=1e-12)

    def test_tight_prior_recovers_cp(self, mdesign, u_alpha):
        st1 = InterimState.from_means(UNDER, mdesign)
        mu0 = np.array([0, 0.25, 0.5, 0.75, 1.0])
        post = bp.posterior(bp.ConjugatePrior(mu0, 1e10), st1, 2.0)
        pp = bp.pp_closed_form_multi(post, 120, st1, mdesign, u_alpha, CFG)
        cp = freqpower.conditional_power_multi(120, mdesign.contrasts @ mu0, st1, mdesign, u_alpha, CFG)
        assert pp == pytest.approx(cp, abs=1e-6)

    @pytest.mark.parametrize("case", range(3))
    def test_against_predictive_simulation(self, mdesign, u_alpha, case):
        rng = np.random.default_rng(300 + case)
        st1 = random_state(mdesign, rng, 0.4)
        prior = bp.FlatPrior() if case == 0 else bp.ConjugatePrior(np.zeros(5), 5.0)
        post = bp.posterior(prior, st1, 2.0)
        n2 = rng.uniform(100, 195)
        pp = bp.pp_closed_form_multi(post, n2, st1, mdesign, u_alpha, CFG)
        p, se = oracles.predictive_rejection(post.mean, post.cov, 2.0, n2, EQUAL, mdesign.contrasts, 70, EQUAL,
                                             st1.t1, 100, u_alpha, seed=case)
        assert abs(pp - p) <= 3 * se + CFG.abs_tol

    def test_monte_carlo_routes_agree(self, mdesign, u_alpha):
        st1 = InterimState.from_means(UNDER, mdesign)
        post = bp.posterior(bp.ConjugatePrior(np.zeros(5), 5.0), st1, 2.0)
        draws = post.sample(2000, np.random.default_rng(5))
        qmc = bp.pp_monte_carlo(draws, 140, st1, mdesign, u_alpha, CFG)
        sim = bp.pp_monte_carlo(draws, 140, st1, mdesign, u_alpha, CFG, inner_draws=200, seed=1)
        closed = bp.pp_closed_form_multi(post, 140, st1, mdesign, u_alpha, CFG)
        assert abs(qmc.estimate - closed) <= 3 * qmc.std_error + CFG.abs_tol
        assert abs(sim.estimate - closed) <= 3 * sim.std_error + CFG.abs_tol

    def test_zero_limit(self, mdesign, u_alpha):
        st1 = InterimState.from_means(UNDER * 2, mdesign)
        post = bp.posterior(bp.FlatPrior(), st1, 2.0)
        near = bp.pp_closed_form_multi(post, 1e-10, st1, mdesign, u_alpha, CFG)
        assert near == pytest.approx(bp.pp_at_zero(post, st1, mdesign, u_alpha, CFG), abs=2 * CFG.abs_tol)


# interim that is strongly significant at stage 1 while the prior pulls the
# effect the other way; its predictive power rises above target and falls back
HUMP_Y = LINEAR_C * 1.7289
HUMP_PRIOR = bp.ConjugatePrior(LINEAR_C * -1.7010, 2.6366)


class TestDecision:
    def test_first_crossing(self):
        grid = np.arange(1.0, 8.0)
        assert bp.first_crossing([0.1, 0.5, 0.81, 0.7, 0.9, 0.2, 0.95], grid, 0.8) == 3.0
        assert bp.first_crossing([0.1, 0.2], grid[:2], 0.8) is None

    def test_hump_scan_returns_first_crossing(self):
        d = single_design()
        st1 = InterimState.from_means(HUMP_Y, d)
        post = bp.posterior(HUMP_PRIOR, st1, 2.0)
        grid = np.arange(1.0, 171.0)
        pp = np.array([pp_reference(post, n, st1, d) for n in grid])
        assert pp.max() >= 0.8 > pp[-1]
        exhaustive = grid[np.argmax(pp >= 0.8)]
        assert bp.first_crossing(bp.pp_closed_form_single(post, grid, st1, d), grid, 0.8) == exhaustive
        assert exhaustive < d.n2
        dec = bp.pp_ssr_decide(st1, d, HUMP_PRIOR)
        assert dec.zone == PROMISING
        assert dec.n2_new == d.n2  # no decrease below the planned size

    def test_scan_matches_exhaustive_search(self):
        d = single_design()
        rng = np.random.default_rng(21)
        grid = np.arange(1.0, 171.0)
        promising = 0
        for _ in range(150):
            st1 = random_state(d, rng, 0.8)
            dec = bp.pp_ssr_decide(st1, d, bp.FlatPrior())
            post = bp.posterior(bp.FlatPrior(), st1, 2.0)
            pp_n2 = pp_reference(post, d.n2, st1, d)
            pp0 = bp.pp_at_zero(post, st1, d)
            if pp_n2 < 0.3 and pp0 < 0.3:
                assert dec.zone == UNFAVORABLE
            elif pp_n2 >= 0.8 or pp0 >= 0.8:
                assert dec.zone == FAVORABLE
            else:
                promising += 1
                pp = np.array([pp_reference(post, n, st1, d) for n in grid])
                hit = np.nonzero(pp >= 0.8)[0]
                expected = d.n_max if hit.size == 0 else grid[hit[0]]
                assert dec.zone == PROMISING
                assert dec.n2_new == max(expected, d.n2)
        assert promising >= 10

    def test_cap_when_target_unreachable(self):
        d = single_design()
        st1 = InterimState.from_means(LINEAR_C * 0.5, d)
        prior = bp.FlatPrior()
        post = bp.posterior(prior, st1, 2.0)
        grid = np.arange(1.0, 171.0)
        pp = bp.pp_closed_form_single(post, grid, st1, d)
        assert pp.max() < 0.8 and pp[89] >= 0.3
        dec = bp.pp_ssr_decide(st1, d, prior)
        assert dec.zone == PROMISING and dec.n2_new == d.n_max

    def test_multi_scan_steps_agree(self, mdesign, u_alpha):
        rng = np.random.default_rng(33)
        seen = 0
        for _ in range(40):
            st1 = random_state(mdesign, rng, 0.5)
            fine = bp.pp_ssr_decide(st1, mdesign, bp.FlatPrior(), u_alpha, CFG, scan_step=1)
            coarse = bp.pp_ssr_decide(st1, mdesign, bp.FlatPrior(), u_alpha, CFG, scan_step=5)
            assert fine.zone == coarse.zone
            if fine.zone == PROMISING:
                seen += 1
                # both scans locate the same crossing up to QMC noise near the target
                assert abs(fine.n2_new - coarse.n2_new) <= 2
                if fine.n2_new < mdesign.n_max and fine.n2_new > mdesign.n2:
                    post = bp.posterior(bp.FlatPrior(), st1, 2.0)
                    at = bp.pp_closed_form_multi(post, fine.n2_new, st1, mdesign, u_alpha, CFG)
                    before = bp.pp_closed_form_multi(post, fine.n2_new - 1, st1, mdesign, u_alpha, CFG)
                    assert at >= 0.8 - 2 * CFG.abs_tol
                    assert before < 0.8 + 2 * CFG.abs_tol
        assert seen >= 3
