"""Posterior predictive power and the Bayesian re-estimation rule.

Three prior regimes are supported: flat, independent conjugate normal and an
arbitrary log-density.  The last one is handled through a Laplace (normal)
approximation of the posterior, or by averaging conditional power over
caller-supplied posterior draws.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, special

from . import gaussian
from .errors import (
    ConvergenceError,
    CurvatureError,
    DomainError,
    InsufficientSamplesError,
    ValidationError,
)
from .freqpower import (
    FAVORABLE,
    PROMISING,
    UNFAVORABLE,
    SsrDecision,
    cp_multi_law,
    cp_multi_many,
    cp_single,
)
from .gaussian import DEFAULT_QMC

MIN_DRAWS = 100


@dataclass(frozen=True)
class FlatPrior:
    kind = "flat"


@dataclass(frozen=True, eq=False)
class ConjugatePrior:
    """Independent normal priors ``mu_i ~ N(mu0_i, 1 / tau0_i)``."""

    mu0: np.ndarray
    tau0: np.ndarray
    kind = "conjugate"

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        tau0 = np.broadcast_to(np.asarray(self.tau0, dtype=float), mu0.shape).copy()
        if np.any(~np.isfinite(mu0)):
            raise ValidationError("prior means must be finite", code="E_PRIOR")
        if np.any(~(tau0 > 0)) or np.any(~np.isfinite(tau0)):
            raise ValidationError("prior precisions must be positive and finite", code="E_PRIOR")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "tau0", tau0)

    def log_density(self, mu):
        return float(-0.5 * np.sum(self.tau0 * (np.asarray(mu) - self.mu0) ** 2))


@dataclass(frozen=True)
class GeneralPrior:
    """Any log-density over the arm-mean vector (up to a constant)."""

    log_density: object
    kind = "general"


@dataclass(frozen=True, eq=False)
class PosteriorNormal:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise DomainError("posterior covariance does not match the mean")
        gaussian.MvnSpec(mean, cov)  # symmetry and PSD checks
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    def sample(self, size, rng):
        """Exact draws, shape ``(size, k)``."""
        return rng.multivariate_normal(self.mean, self.cov, size=size, method="eigh")


# --------------------------------------------------------------------------
# posteriors
# --------------------------------------------------------------------------

def _data_precision(interim, sigma):
    return interim.n1 * interim.phi1 / sigma**2


def _laplace(log_prior, interim, sigma):
    prec = _data_precision(interim, sigma)
    ybar = interim.ybar1

    def neg_log_post(mu):
        value = log_prior(mu)
        if not np.isfinite(value):
            return np.inf
        return 0.5 * np.sum(prec * (ybar - mu) ** 2) - value

    res = optimize.minimize(
        neg_log_post, ybar.copy(), method="BFGS",
        options={"maxiter": 500, "gtol": 1e-9},
    )
    mode = res.x
    if not np.isfinite(res.fun) or (res.nit >= 500 and not res.success):
        raise ConvergenceError(f"posterior mode search did not converge: {res.message}")

    def prior_derivatives(mu):
        # central differences of the log prior; the likelihood part is exact
        k = mu.size
        h = 1e-4 * (1.0 + np.abs(mu))
        f0 = log_prior(mu)
        grad = np.zeros(k)
        hess = np.zeros((k, k))
        for i in range(k):
            ei = np.zeros(k)
            ei[i] = h[i]
            fp, fm = log_prior(mu + ei), log_prior(mu - ei)
            grad[i] = (fp - fm) / (2 * h[i])
            hess[i, i] = (fp - 2 * f0 + fm) / h[i] ** 2
            for j in range(i):
                ej = np.zeros(k)
                ej[j] = h[j]
                hess[i, j] = hess[j, i] = (
                    log_prior(mu + ei + ej) - log_prior(mu + ei - ej)
                    - log_prior(mu - ei + ej) + log_prior(mu - ei - ej)
                ) / (4 * h[i] * h[j])
        return grad, hess

    for _ in range(2):
        grad, hess = prior_derivatives(mode)
        g = prec * (ybar - mode) + grad
        H = hess - np.diag(prec)
        if not np.all(np.isfinite(H)):
            raise CurvatureError("log posterior is not twice differentiable at the mode")
        try:
            mode = mode - np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise CurvatureError("singular Hessian at the posterior mode") from exc
    _, hess = prior_derivatives(mode)
    neg_h = np.diag(prec) - hess
    neg_h = 0.5 * (neg_h + neg_h.T)
    if np.linalg.eigvalsh(neg_h).min() <= 0:
        raise CurvatureError("posterior is not locally Gaussian at its mode")
    return PosteriorNormal(mode, np.linalg.inv(neg_h))


def posterior(prior, interim, sigma):
    """Normal posterior (exact, or Laplace for a general prior)."""
    prec = _data_precision(interim, sigma)
    if prior.kind == "flat":
        return PosteriorNormal(interim.ybar1.copy(), np.diag(1.0 / prec))
    if prior.kind == "conjugate":
        if prior.mu0.size != interim.ybar1.size:
            raise ValidationError("prior length does not match the number of arms", code="E_PRIOR")
        total = prior.tau0 + prec
        mean = (prior.tau0 * prior.mu0 + prec * interim.ybar1) / total
        return PosteriorNormal(mean, np.diag(1.0 / total))
    if prior.kind == "general":
        return _laplace(prior.log_density, interim, sigma)
    raise DomainError(f"unknown prior kind {prior.kind!r}")


# --------------------------------------------------------------------------
# predictive power
# --------------------------------------------------------------------------

def _pp_single_arg(mean_effect, effect_var, n2, t1, design):
    """Phi argument of the single-contrast predictive power (vectorized)."""
    w1, w2, s2, sigma = design.w1[0], design.w2[0], design.s2[0], design.sigma
    n2 = np.asarray(n2, dtype=float)
    a = (math.sqrt(w1) * t1 + math.sqrt(w2) * mean_effect * np.sqrt(n2) / (sigma * math.sqrt(s2)))
    a = a / math.sqrt(w1 + w2)
    b = w2 / (w1 + w2) * (n2 * effect_var / (sigma**2 * s2) + 1.0)
    return (a - design.z_alpha) / np.sqrt(b)


def pp_closed_form_single(post, n2, interim, design):
    """Posterior predictive power for a single contrast (vectorized in ``n2``)."""
    if not np.all(np.asarray(n2) > 0):
        raise DomainError("n2 must be positive")
    c = design.contrasts[0]
    out = special.ndtr(_pp_single_arg(c @ post.mean, c @ post.cov @ c, n2, interim.t1[0], design))
    return float(out) if np.ndim(out) == 0 else out


def pp_multi_law(post, n2, t1, design):
    """Mean and covariance of the predictive law of the combined vector."""
    C, sigma = design.contrasts, design.sigma
    w1, w2 = design.w1, design.w2
    w2_real = n2 * design.s2
    mean = (np.sqrt(w1) * np.asarray(t1) + n2 / sigma * np.sqrt(w2 / w2_real) * (C @ post.mean))
    mean = mean / np.sqrt(w1 + w2)
    _, null_cov = cp_multi_law(n2, np.zeros(design.m), np.zeros(design.m), design)
    d = np.sqrt(w2 / (w1 + w2)) * np.sqrt(n2) / (sigma * np.sqrt(design.s2))
    extra = (C @ post.cov @ C.T) * np.outer(d, d)
    cov = null_cov + extra
    return mean, 0.5 * (cov + cov.T)


def pp_closed_form_multi(post, n2, interim, design, u_alpha=None, cfg=None):
    """Predictive power of the maximum contrast test.

    ``n2`` may be an array; all sizes are then evaluated in one batch.
    """
    cfg = cfg or DEFAULT_QMC
    if u_alpha is None:
        u_alpha = design.critical_value(cfg)
    n2_arr = np.atleast_1d(np.asarray(n2, dtype=float))
    if np.any(n2_arr <= 0):
        raise DomainError("n2 must be positive")
    laws = [pp_multi_law(post, n, interim.t1, design) for n in n2_arr]
    means = np.array([mu for mu, _ in laws])
    covs = np.array([cv for _, cv in laws])
    est, _ = gaussian.mvn_orthant_cdf_many(means, covs, u_alpha, cfg)
    out = 1.0 - est
    return float(out[0]) if np.ndim(n2) == 0 else out


def pp_at_zero(post, interim, design, u_alpha=None, cfg=None):
    """Limit of the predictive power as the stage-2 size shrinks to zero.

    The posterior enters only through stage 1, so ``post`` is accepted for a
    uniform call signature but does not affect the value.
    """
    if design.m == 1:
        w1, w2 = design.w1[0], design.w2[0]
        arg = (math.sqrt(w1) * interim.t1[0] - design.z_alpha * math.sqrt(w1 + w2)) / math.sqrt(w2)
        return float(special.ndtr(arg))
    cfg = cfg or DEFAULT_QMC
    if u_alpha is None:
        u_alpha = design.critical_value(cfg)
    mean = np.sqrt(design.w1) * interim.t1 / np.sqrt(design.w1 + design.w2)
    _, cov = cp_multi_law(1.0, np.zeros(design.m), np.zeros(design.m), design)
    return 1.0 - gaussian.mvn_equicoordinate_cdf(gaussian.MvnSpec(mean, cov), u_alpha, cfg).estimate


def pp_monte_carlo(samples, n2, interim, design, u_alpha=None, cfg=None, inner_draws=None, seed=0):
    """Average conditional power over posterior draws.

    Returns ``(estimate, std_error)`` with the standard error taken across
    draws.  With several contrasts the conditional power of each draw is a
    QMC value by default; ``inner_draws`` replaces it by the mean over that
    many simulated stage-2 outcomes (unbiased, and much cheaper for very long
    draw sequences).  The standard error then includes that extra noise.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < MIN_DRAWS:
        raise InsufficientSamplesError(f"need at least {MIN_DRAWS} posterior draws")
    effects = samples @ design.contrasts.T
    if design.m == 1:
        values = cp_single(n2, effects[:, 0], interim.t1[0], design)
    else:
        cfg = cfg or DEFAULT_QMC
        if u_alpha is None:
            u_alpha = design.critical_value(cfg)
        if inner_draws is None:
            uniq, inverse = np.unique(effects, axis=0, return_inverse=True)
            cp = cp_multi_many(n2, uniq, interim.t1, design, u_alpha, cfg)
            values = cp[inverse.ravel()]
        else:
            values = _cp_multi_simulated(n2, effects, interim.t1, design, u_alpha, inner_draws, seed)
    S = values.size
    estimate = math.fsum(values) / S
    std_error = float(np.std(values, ddof=1) / math.sqrt(S))
    return gaussian.MvnResult(estimate, std_error)


def _cp_multi_simulated(n2, effects, t1, design, u_alpha, inner, seed):
    mean0, cov = cp_multi_law(n2, np.zeros(design.m), t1, design)
    slope = (n2 / design.sigma) * np.sqrt(design.w2 / (n2 * design.s2)) / np.sqrt(design.w1 + design.w2)
    root = np.linalg.cholesky(cov + 1e-14 * np.eye(design.m))
    rng = np.random.Generator(np.random.Philox(key=seed))
    values = np.empty(effects.shape[0])
    block = max(1, 2_000_000 // (inner * design.m))
    for start in range(0, effects.shape[0], block):
        eff = effects[start:start + block]
        z = rng.standard_normal((eff.shape[0], inner, design.m)) @ root.T
        stat = mean0 + slope * eff[:, None, :] + z
        values[start:start + block] = (stat.max(axis=2) > u_alpha).mean(axis=1)
    return values


# --------------------------------------------------------------------------
# decision rule
# --------------------------------------------------------------------------

def first_crossing(values, grid, target):
    """First grid point whose value reaches ``target`` (None when none does)."""
    hit = np.nonzero(np.asarray(values) >= target)[0]
    return float(grid[hit[0]]) if hit.size else None


_SCREEN_BUDGET = 256
_SCREEN_MARGIN = 6.0


def _first_hit_multi(post, grid, interim, design, u_alpha, cfg):
    """First grid point with predictive power at least ``1 - beta``.

    Every point is screened with a small point set; only points whose
    screening estimate comes within a few standard errors of the target are
    re-evaluated at full accuracy, in grid order.
    """
    if grid.size == 0:
        return None
    target = design.target_power
    laws = [pp_multi_law(post, n, interim.t1, design) for n in grid]
    means = np.array([mu for mu, _ in laws])
    covs = np.array([cv for _, cv in laws])
    cheap = replace(cfg, sample_budget=_SCREEN_BUDGET, adaptive=False)
    est, se = gaussian.mvn_orthant_cdf_many(means, covs, u_alpha, cheap)
    pp, margin = 1.0 - est, _SCREEN_MARGIN * se + 1e-3
    candidates = np.nonzero(pp + margin >= target)[0]
    for i in candidates:
        full = 1.0 - gaussian.mvn_orthant_cdf_many(means[i:i + 1], covs[i], u_alpha, cfg)[0][0]
        if full >= target:
            return float(grid[i])
    return None


def _scan_multi(post, interim, design, u_alpha, cfg, step):
    top = int(math.floor(design.n_max))
    coarse = np.arange(step, top + 1, step, dtype=float)
    if coarse.size == 0 or coarse[-1] != top:
        coarse = np.append(coarse, float(top))
    hit = _first_hit_multi(post, coarse, interim, design, u_alpha, cfg)
    if hit is None or step == 1:
        return hit
    pos = int(np.searchsorted(coarse, hit))
    start = coarse[pos - 1] + 1 if pos > 0 else 1.0
    fine = _first_hit_multi(post, np.arange(start, hit, dtype=float), interim, design, u_alpha, cfg)
    return hit if fine is None else fine


def pp_ssr_decide(interim, design, prior, u_alpha=None, cfg=None, scan_step=1):
    """Sample size re-estimation driven by posterior predictive power.

    With several contrasts, ``scan_step > 1`` scans a coarse grid first and
    then every integer just below the first coarse crossing.
    """
    post = posterior(prior, interim, design.sigma)
    if design.m == 1:
        pp_n2 = pp_closed_form_single(post, design.n2, interim, design)
    else:
        cfg = cfg or DEFAULT_QMC
        if u_alpha is None:
            u_alpha = design.critical_value(cfg)
        pp_n2 = pp_closed_form_multi(post, design.n2, interim, design, u_alpha, cfg)
    pp0 = pp_at_zero(post, interim, design, u_alpha, cfg)
    target, floor_min = design.target_power, design.cp_min
    if pp_n2 < floor_min and pp0 < floor_min:
        return SsrDecision(UNFAVORABLE, float(design.n2), pp_n2, pp0)
    if pp_n2 >= target or pp0 >= target:
        return SsrDecision(FAVORABLE, float(design.n2), pp_n2, pp0)
    if design.m == 1:
        grid = np.arange(1, int(math.floor(design.n_max)) + 1, dtype=float)
        hit = first_crossing(pp_closed_form_single(post, grid, interim, design), grid, target)
    else:
        hit = _scan_multi(post, interim, design, u_alpha, cfg, int(scan_step))
    n2_new = design.n_max if hit is None else min(hit, design.n_max)
    return SsrDecision(PROMISING, float(max(n2_new, design.n2)), pp_n2, pp0)
