"""Dose-response shapes, optimal contrasts and fixed-design power.

Sample sizes are real numbers throughout; integer rounding happens only
where a caller asks for it (``rounding="per_arm_equal"``).
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize, special, stats

from . import gaussian
from .errors import (
    DegenerateProfileError,
    DomainError,
    InfeasibleError,
    ValidationError,
)
from .gaussian import DEFAULT_QMC, MvnSpec

ROUNDING_POLICIES = ("none", "per_arm_equal")


# --------------------------------------------------------------------------
# validated primitives
# --------------------------------------------------------------------------

def as_allocation(phi, k=None):
    """Validate an allocation vector (positive entries summing to one)."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 1:
        raise ValidationError("allocation must be a vector", code="E_ALLOC_SHAPE")
    if k is not None and phi.size != k:
        raise ValidationError(
            f"allocation has {phi.size} entries, expected {k}", code="E_ALLOC_SHAPE"
        )
    if np.any(~np.isfinite(phi)) or np.any(phi <= 0):
        raise ValidationError("allocation entries must be positive", code="E_ALLOC_POSITIVE")
    if abs(phi.sum() - 1.0) > 1e-12:
        raise ValidationError(
            f"allocation must sum to one (sums to {phi.sum():.15g})", code="E_ALLOC_SUM"
        )
    return phi


def as_contrasts(C, k=None):
    """Validate a contrast matrix: rows sum to zero and have unit norm."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.ndim != 2 or C.shape[0] < 1:
        raise ValidationError("contrasts must be an (m, k) matrix", code="E_CONTRAST_SHAPE")
    if k is not None and C.shape[1] != k:
        raise ValidationError(
            f"contrasts have {C.shape[1]} columns, expected {k}", code="E_CONTRAST_SHAPE"
        )
    if np.any(np.abs(C.sum(axis=1)) > 1e-10):
        raise ValidationError("every contrast must sum to zero", code="E_CONTRAST_SUM")
    if np.any(np.abs(np.linalg.norm(C, axis=1) - 1.0) > 1e-10):
        raise ValidationError("every contrast must have unit norm", code="E_CONTRAST_NORM")
    return C


@dataclass(frozen=True, eq=False)
class DoseResponseProfile:
    doses: np.ndarray
    means: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        doses = np.asarray(self.doses, dtype=float)
        means = np.asarray(self.means, dtype=float)
        if doses.ndim != 1 or doses.size < 3:
            raise DomainError("a dose-response profile needs at least three arms")
        if np.any(np.diff(doses) <= 0):
            raise DomainError("doses must be strictly increasing")
        if means.shape != doses.shape:
            raise DomainError("means and doses must have the same length")
        object.__setattr__(self, "doses", doses)
        object.__setattr__(self, "means", means)


def _positive(name, value):
    if value is None or not float(value) > 0:
        raise DomainError(f"shape parameter {name} must be positive, got {value!r}")
    return float(value)


def shape_profile(model, doses, *, ed50=None, delta=None, h=None, values=None, label=None):
    """Standardized mean profile of a candidate dose-response model.

    ``model`` is one of ``linear``, ``emax`` (needs ``ed50``),
    ``exponential`` (needs ``delta``), ``sigmoid_emax`` (needs ``ed50`` and
    ``h``) or ``custom`` (needs ``values``).
    """
    d = np.asarray(doses, dtype=float)
    if model == "linear":
        means = d.copy()
    elif model == "emax":
        e = _positive("ed50", ed50)
        means = d / (e + d)
    elif model == "exponential":
        s = _positive("delta", delta)
        means = np.expm1(d / s)
    elif model == "sigmoid_emax":
        e, hh = _positive("ed50", ed50), _positive("h", h)
        means = d**hh / (e**hh + d**hh)
    elif model == "custom":
        if values is None:
            raise DomainError("custom profile needs explicit values")
        means = np.asarray(values, dtype=float)
    else:
        raise DomainError(f"unknown dose-response model {model!r}")
    return DoseResponseProfile(d, means, label or model)


def optimal_contrast(profile, phi):
    """Most powerful single contrast for an anticipated mean profile.

    Proportional to ``phi_i * (mu_i - sum_j phi_j mu_j)``, normalized to unit
    length and oriented so that the contrast is positive on the profile.
    """
    mu = profile.means if isinstance(profile, DoseResponseProfile) else np.asarray(profile, float)
    phi = as_allocation(phi, mu.size)
    c = phi * (mu - phi @ mu)
    norm = np.linalg.norm(c)
    if norm <= 1e-12 * max(1.0, float(np.max(np.abs(mu)))):
        raise DegenerateProfileError("a constant profile has no contrast direction")
    c = c / norm
    # exact zero sum after normalization
    c = c - c.mean()
    c = c / np.linalg.norm(c)
    return c if c @ mu > 0 else -c


def stage_weight(c, n, phi):
    """Combination weight ``n * sum_i c_i**2 / phi_i`` (vectorized over rows)."""
    c = np.asarray(c, dtype=float)
    return n * np.sum(c**2 / np.asarray(phi, dtype=float), axis=-1)


def contrast_correlation(C, phi):
    """Correlation of the contrast statistics ``C ybar`` under allocation ``phi``."""
    M = (C / phi) @ C.T
    d = np.sqrt(np.diag(M))
    return M / np.outer(d, d)


# --------------------------------------------------------------------------
# single contrast
# --------------------------------------------------------------------------

REFERENCES = ("normal", "t")


def single_power(delta, c, phi, sigma, N, alpha, reference="normal"):
    """Power of the one-sided trend test at total size ``N``.

    ``reference="t"`` evaluates the same test as a t test with ``N - k``
    degrees of freedom (noncentral t), the usual planning convention when
    the variance will be estimated from the data.
    """
    scale = sigma * math.sqrt(float(np.sum(np.asarray(c) ** 2 / np.asarray(phi))))
    ncp = delta * np.sqrt(N) / scale
    if reference == "normal":
        return float(special.ndtr(ncp - gaussian.norm_quantile(1.0 - alpha)))
    if reference == "t":
        df = N - np.asarray(phi).size
        if not df > 0:
            raise DomainError("t reference needs more subjects than arms")
        crit = stats.t.ppf(1.0 - alpha, df)
        return float(stats.nct.sf(crit, df, ncp)) if ncp != 0 else float(stats.t.sf(crit, df))
    raise DomainError(f"reference must be one of {REFERENCES}, got {reference!r}")


def _round_per_arm(N, k):
    return k * math.ceil(N / k - 1e-9)


def _check_rounding(rounding, phi):
    if rounding not in ROUNDING_POLICIES:
        raise DomainError(f"rounding must be one of {ROUNDING_POLICIES}, got {rounding!r}")
    if rounding == "per_arm_equal" and np.ptp(phi) > 1e-12:
        raise DomainError("per_arm_equal rounding needs an equal allocation")


def single_sample_size(delta, c, phi, sigma, alpha, beta, rounding="none", reference="normal"):
    """Smallest total size reaching power ``1 - beta`` for a single contrast."""
    phi = as_allocation(phi)
    _check_rounding(rounding, phi)
    if not delta > 0:
        raise InfeasibleError("the contrast effect must be positive")
    z = gaussian.norm_quantile(1.0 - alpha) + gaussian.norm_quantile(1.0 - beta)
    N = float(np.sum(np.asarray(c) ** 2 / phi)) * sigma**2 * z**2 / delta**2
    k = phi.size

    def power(n):
        return single_power(delta, c, phi, sigma, n, alpha, reference)

    if reference == "t":
        # the t test needs slightly more than the normal-theory size
        hi = N + k + 1.0
        while power(hi) < 1 - beta:
            hi *= 1.5
        N = optimize.brentq(lambda n: power(n) - (1 - beta), max(N, k + 1e-6), hi, xtol=1e-10)
    elif reference != "normal":
        raise DomainError(f"reference must be one of {REFERENCES}, got {reference!r}")
    if rounding == "none":
        return N
    n_round = _round_per_arm(N, k)
    # guard against a rounding slip right at the boundary
    while n_round > k and power(n_round - k) >= 1 - beta:
        n_round -= k
    while power(n_round) < 1 - beta:
        n_round += k
    return n_round


# --------------------------------------------------------------------------
# multiple contrasts
# --------------------------------------------------------------------------

def combined_null_cov(C, n1, phi1, n2, phi2):
    """Null covariance of the weighted combination of stage statistics."""
    C = np.atleast_2d(C)
    W = stage_weight(C, n1, phi1) + stage_weight(C, n2, phi2)
    M = n1 * (C / phi1) @ C.T + n2 * (C / phi2) @ C.T
    s = 1.0 / np.sqrt(W)
    cov = M * np.outer(s, s)
    return 0.5 * (cov + cov.T)


def mcp_critical_value(C, n1, phi1, n2, phi2, alpha, cfg=None):
    """Familywise critical value: the ``1 - alpha`` equicoordinate quantile."""
    cov = combined_null_cov(C, n1, phi1, n2, phi2)
    spec = MvnSpec(np.zeros(cov.shape[0]), cov)
    return gaussian.mvn_equicoordinate_quantile(spec, 1.0 - alpha, cfg)


def fixed_critical_value(C, phi, alpha, cfg=None):
    """Critical value of the one-stage maximum contrast test."""
    spec = MvnSpec(np.zeros(np.atleast_2d(C).shape[0]), contrast_correlation(np.atleast_2d(C), phi))
    return gaussian.mvn_equicoordinate_quantile(spec, 1.0 - alpha, cfg)


def mcp_power(mu, C, phi, sigma, N, u_alpha, cfg=None):
    """``Pr(max(T) > u_alpha)`` for a one-stage design of total size ``N``."""
    C = np.atleast_2d(C)
    mean = math.sqrt(N) / sigma * (C @ np.asarray(mu, float)) / np.sqrt(np.sum(C**2 / phi, axis=1))
    spec = MvnSpec(mean, contrast_correlation(C, phi))
    return 1.0 - gaussian.mvn_equicoordinate_cdf(spec, u_alpha, cfg).estimate


def mcp_sample_size(mu, C, phi, sigma, alpha, beta, rounding="none", cfg=None, u_alpha=None):
    """Smallest total size with maximum-contrast power at least ``1 - beta``.

    Power is increasing in ``N``; the root is bracketed by doubling and then
    bisected on the continuous scale to 0.5.
    """
    C = np.atleast_2d(np.asarray(C, float))
    phi = as_allocation(phi, C.shape[1])
    _check_rounding(rounding, phi)
    if not np.any(C @ np.asarray(mu, float) > 0):
        raise InfeasibleError("no contrast has a positive effect under mu")
    cfg = cfg or DEFAULT_QMC
    if u_alpha is None:
        u_alpha = fixed_critical_value(C, phi, alpha, cfg)
    target = 1.0 - beta

    def power(n):
        return mcp_power(mu, C, phi, sigma, n, u_alpha, cfg)

    lo, hi = 0.0, float(C.shape[1])
    while power(hi) < target:
        lo, hi = hi, 2.0 * hi
        if hi > 1e9:
            raise InfeasibleError("target power not reachable")
    while hi - lo > 0.5:
        mid = 0.5 * (lo + hi)
        if power(mid) >= target:
            hi = mid
        else:
            lo = mid
    if rounding == "none":
        return hi
    k = phi.size
    n_round = _round_per_arm(hi, k)
    while n_round > k and power(n_round - k) >= target:
        n_round -= k
    while power(n_round) < target:
        n_round += k
    return n_round


# --------------------------------------------------------------------------
# two-stage design
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoStageDesign:
    """Pre-declared two-stage design with its re-estimation constants.

    ``cp_min`` is the lower edge of the promising zone and serves as
    ``pp_min`` for the Bayesian rule as well.
    """

    doses: np.ndarray
    sigma: float
    phi1: np.ndarray
    phi2: np.ndarray
    n1: float
    n2: float
    contrasts: np.ndarray
    alpha: float = 0.1
    beta: float = 0.2
    n_max: float = None
    cp_min: float = 0.3
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        doses = np.asarray(self.doses, dtype=float)
        k = doses.size
        if k < 3:
            raise ValidationError("at least three arms are required", code="E_ARMS")
        if np.any(np.diff(doses) <= 0):
            raise ValidationError("doses must be strictly increasing", code="E_DOSES")
        set_ = lambda name, value: object.__setattr__(self, name, value)
        set_("doses", doses)
        set_("phi1", as_allocation(self.phi1, k))
        set_("phi2", as_allocation(self.phi2, k))
        set_("contrasts", as_contrasts(self.contrasts, k))
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive", code="E_SIGMA")
        if not (self.n1 > 0 and self.n2 > 0):
            raise ValidationError("stage sizes must be positive", code="E_STAGE_SIZE")
        n_max = self.n2 if self.n_max is None else self.n_max
        if n_max < self.n2:
            raise ValidationError("n_max must not be smaller than n2", code="E_NMAX")
        set_("n_max", float(n_max))
        if not 0 < self.alpha < 0.5:
            raise ValidationError("alpha must lie in (0, 0.5)", code="E_ALPHA")
        if not 0 < self.beta < 0.5:
            raise ValidationError("beta must lie in (0, 0.5)", code="E_BETA")
        if not 0 < self.cp_min < 1 - self.beta:
            raise ValidationError("cp_min must lie in (0, 1 - beta)", code="E_CP_MIN")

    @property
    def k(self):
        return self.doses.size

    @property
    def m(self):
        return self.contrasts.shape[0]

    @property
    def target_power(self):
        return 1.0 - self.beta

    @cached_property
    def z_alpha(self):
        return gaussian.norm_quantile(1.0 - self.alpha)

    @cached_property
    def z_beta(self):
        return gaussian.norm_quantile(1.0 - self.beta)

    @cached_property
    def s1(self):
        """Per-contrast ``sum_i c_i**2 / phi1_i``."""
        return np.sum(self.contrasts**2 / self.phi1, axis=1)

    @cached_property
    def s2(self):
        return np.sum(self.contrasts**2 / self.phi2, axis=1)

    @cached_property
    def w1(self):
        return self.n1 * self.s1

    @cached_property
    def w2(self):
        return self.n2 * self.s2

    @cached_property
    def stage2_corr(self):
        return contrast_correlation(self.contrasts, self.phi2)

    @cached_property
    def null_cov(self):
        return combined_null_cov(self.contrasts, self.n1, self.phi1, self.n2, self.phi2)

    def critical_value(self, cfg=None):
        """``Z_alpha`` for one contrast, otherwise the familywise ``U_alpha``."""
        if self.m == 1:
            return self.z_alpha
        cfg = cfg or DEFAULT_QMC
        key = ("u_alpha", cfg)
        if key not in self._cache:
            self._cache[key] = mcp_critical_value(
                self.contrasts, self.n1, self.phi1, self.n2, self.phi2, self.alpha, cfg
            )
        return self._cache[key]
