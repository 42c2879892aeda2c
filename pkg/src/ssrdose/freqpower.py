"""Stage statistics, inverse-normal combination and conditional power.

The combination weights always come from the pre-declared stage sizes; a
re-estimated stage-2 size only changes the data behind the stage-2
statistic, never its weight.  That is what keeps the final test at level
``alpha`` whatever the interim decision was.
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import gaussian
from .errors import DomainError, ValidationError
from .gaussian import DEFAULT_QMC, MvnSpec

UNFAVORABLE = "unfavorable"
FAVORABLE = "favorable"
PROMISING = "promising"
ZONES = (UNFAVORABLE, FAVORABLE, PROMISING)


@dataclass(frozen=True, eq=False)
class InterimState:
    """Stage-1 summary: per-arm means, stage size, allocation and statistics."""

    ybar1: np.ndarray
    n1: float
    phi1: np.ndarray
    t1: np.ndarray

    @classmethod
    def from_means(cls, ybar1, design, t1=None):
        ybar1 = np.asarray(ybar1, dtype=float)
        if ybar1.shape != (design.k,):
            raise ValidationError(
                f"stage-1 means need {design.k} entries, got shape {ybar1.shape}",
                code="E_STAGE1_SHAPE",
            )
        expected = stage_statistic(ybar1, design.n1, design.phi1, design.contrasts, design.sigma)
        if t1 is None:
            t1 = expected
        else:
            t1 = np.atleast_1d(np.asarray(t1, dtype=float))
            if t1.shape != expected.shape or np.any(np.abs(t1 - expected) > 1e-10 * (1 + np.abs(expected))):
                raise ValidationError("t1 is inconsistent with the stage-1 means", code="E_T1")
        return cls(ybar1, float(design.n1), design.phi1, t1)


@dataclass(frozen=True)
class SsrDecision:
    zone: str
    n2_new: float
    metric_at_n2: float
    metric_at_zero: float = None


def stage_statistic(ybar, n, phi, c, sigma):
    """Standardized contrast statistic(s) of one stage.

    ``c`` may be a single contrast or an ``(m, k)`` matrix; ``ybar`` may
    carry leading batch dimensions.
    """
    if not np.all(np.asarray(n) > 0):
        raise DomainError("stage size must be positive")
    c = np.asarray(c, dtype=float)
    scale = sigma * np.sqrt(np.sum(c**2 / phi, axis=-1) / n)
    return (np.asarray(ybar, dtype=float) @ c.T) / scale


def combine(t1, t2, w1, w2):
    """Inverse-normal combination with fixed weights."""
    return (np.sqrt(w1) * t1 + np.sqrt(w2) * t2) / np.sqrt(w1 + w2)


def combine_multi(t1, t2, W1, W2):
    """Componentwise combination; ``W1``/``W2`` are diagonal matrices or their diagonals."""
    w1 = np.diag(W1) if np.ndim(W1) == 2 else np.asarray(W1, float)
    w2 = np.diag(W2) if np.ndim(W2) == 2 else np.asarray(W2, float)
    return combine(np.asarray(t1, float), np.asarray(t2, float), w1, w2)


def final_test(stat, critical):
    """Reject when the (largest) combined statistic strictly exceeds ``critical``."""
    return bool(np.max(stat) > critical)


def observed_effect(ybar1, design):
    """Contrast estimates ``C ybar1`` (one per contrast)."""
    return np.asarray(ybar1, float) @ design.contrasts.T


# --------------------------------------------------------------------------
# single contrast
# --------------------------------------------------------------------------

def conditional_error_shift(t1, design):
    """``(Z_alpha sqrt(w1 + w2) - sqrt(w1) t1) / sqrt(w2)`` for the first contrast."""
    w1, w2 = design.w1[0], design.w2[0]
    return (design.z_alpha * np.sqrt(w1 + w2) - np.sqrt(w1) * np.asarray(t1)) / np.sqrt(w2)


def cp_single(n2, delta, t1, design):
    """Array form of the single-contrast conditional power."""
    drift = np.asarray(delta) * np.sqrt(n2) / (design.sigma * np.sqrt(design.s2[0]))
    return special.ndtr(drift - conditional_error_shift(t1, design))


def conditional_power_single(n2, delta, interim, design):
    """Probability of final rejection given stage 1, a stage-2 size and an effect.

    Vectorizes over ``n2`` and ``delta``.
    """
    if not np.all(np.asarray(n2) > 0):
        raise DomainError("n2 must be positive")
    out = cp_single(n2, delta, interim.t1[0], design)
    return float(out) if np.ndim(out) == 0 else out


def cp_closed_form_n2(delta, t1, design):
    """Stage-2 size solving CP = 1 - beta, capped at ``n_max`` (arrays allowed)."""
    delta = np.asarray(delta, dtype=float)
    root = design.z_beta + conditional_error_shift(t1, design)
    with np.errstate(divide="ignore"):
        n = design.s2[0] * design.sigma**2 / delta**2 * root**2
    n = np.where((delta > 0) & (root > 0), n, design.n_max)
    return np.minimum(n, design.n_max)


def classify(metric, delta_ok, design):
    """Zone labels from the metric at ``N2``; ``delta_ok`` False forces unfavorable."""
    metric = np.asarray(metric)
    zone = np.full(metric.shape, PROMISING, dtype=object)
    zone[metric >= design.target_power] = FAVORABLE
    zone[(metric < design.cp_min) | ~np.asarray(delta_ok, dtype=bool)] = UNFAVORABLE
    return zone


# --------------------------------------------------------------------------
# multiple contrasts
# --------------------------------------------------------------------------

def cp_multi_law(n2, delta_vec, t1, design):
    """Mean and covariance of the combined vector given stage 1.

    The covariance ``D R2 D`` with ``D = (W1 + W2)^(-1/2) W2^(1/2)`` does not
    involve ``n2``; it is still assembled from the realized stage-2 law so the
    cancellation can be checked numerically.
    """
    C, phi2, sigma = design.contrasts, design.phi2, design.sigma
    w1, w2 = design.w1, design.w2
    w2_real = n2 * design.s2
    mean = (np.sqrt(w1) * np.asarray(t1) + n2 / sigma * np.sqrt(w2) / np.sqrt(w2_real)
            * np.asarray(delta_vec)) / np.sqrt(w1 + w2)
    sigma2 = (C / phi2) @ C.T * sigma**2 / n2
    inv = 1.0 / np.sqrt(w2_real)
    # n2 / sigma scales the contrast means to the stage-2 statistic scale
    stage2_cov = (n2 / sigma) ** 2 * sigma2 * np.outer(inv, inv)
    d = np.sqrt(w2) / np.sqrt(w1 + w2)
    cov = stage2_cov * np.outer(d, d)
    return mean, 0.5 * (cov + cov.T)


def conditional_power_multi(n2, delta_vec, interim, design, u_alpha=None, cfg=None):
    """``1 - Psi(U_alpha)`` under the conditional law of the combined vector."""
    if not n2 > 0:
        raise DomainError("n2 must be positive")
    cfg = cfg or DEFAULT_QMC
    if u_alpha is None:
        u_alpha = design.critical_value(cfg)
    mean, cov = cp_multi_law(n2, delta_vec, interim.t1, design)
    return 1.0 - gaussian.mvn_equicoordinate_cdf(MvnSpec(mean, cov), u_alpha, cfg).estimate


def cp_multi_many(n2, delta_vec, t1, design, u_alpha, cfg):
    """Batched multi-contrast CP over rows of ``n2``/``delta_vec``/``t1``."""
    n2 = np.asarray(n2, dtype=float)
    delta_vec = np.atleast_2d(delta_vec)
    t1 = np.atleast_2d(t1)
    B = max(n2.size, delta_vec.shape[0], t1.shape[0])
    n2 = np.broadcast_to(n2.reshape(-1, 1), (B, 1))
    w1, w2, s2 = design.w1, design.w2, design.s2
    mean = (np.sqrt(w1) * t1 + np.sqrt(n2) / design.sigma * np.sqrt(w2 / s2) * delta_vec)
    mean = mean / np.sqrt(w1 + w2)
    _, cov = cp_multi_law(1.0, np.zeros(design.m), np.zeros(design.m), design)
    est, _ = gaussian.mvn_orthant_cdf_many(mean, cov, np.full(design.m, u_alpha), cfg)
    return 1.0 - est


def _solve_multi_n2(cp_at, design):
    """First ``n2`` in ``[N2, n_max]`` with ``cp_at(n2) >= 1 - beta``."""
    target = design.target_power
    if cp_at(design.n_max) < target:
        return design.n_max
    return optimize.brentq(lambda n: cp_at(n) - target, design.n2, design.n_max, xtol=1e-3)


# --------------------------------------------------------------------------
# decision rule
# --------------------------------------------------------------------------

def _effect(delta_source, interim, design):
    if isinstance(delta_source, str):
        if delta_source != "observed":
            raise DomainError(f"unknown delta source {delta_source!r}")
        return observed_effect(interim.ybar1, design)
    delta = np.atleast_1d(np.asarray(delta_source, dtype=float))
    if delta.shape != (design.m,):
        raise DomainError(f"fixed effect needs {design.m} entries, got {delta.size}")
    return delta


def cp_ssr_decide(interim, design, delta_source="observed", u_alpha=None, cfg=None):
    """Promising-zone sample size re-estimation driven by conditional power.

    ``delta_source`` is ``"observed"`` (contrast estimate from stage 1) or a
    fixed effect, one entry per contrast.  The single-contrast case uses the
    closed-form stage-2 size; several contrasts are solved by root finding
    on a frozen-seed estimator.
    """
    delta = _effect(delta_source, interim, design)
    if design.m == 1:
        cp = float(cp_single(design.n2, delta[0], interim.t1[0], design))
        zone = classify(cp, delta[0] >= 0, design)[()]
        if zone != PROMISING:
            return SsrDecision(zone, float(design.n2), cp)
        n2_new = float(cp_closed_form_n2(delta[0], interim.t1[0], design))
        return SsrDecision(zone, max(n2_new, float(design.n2)), cp)

    cfg = cfg or DEFAULT_QMC
    if u_alpha is None:
        u_alpha = design.critical_value(cfg)

    def cp_at(n):
        return conditional_power_multi(n, delta, interim, design, u_alpha, cfg)

    cp = cp_at(design.n2)
    zone = classify(cp, np.max(delta) > 0, design)[()]
    if zone != PROMISING:
        return SsrDecision(zone, float(design.n2), cp)
    return SsrDecision(zone, float(_solve_multi_n2(cp_at, design)), cp)
