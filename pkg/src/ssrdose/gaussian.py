"""Univariate and multivariate normal probabilities.

The multivariate routines estimate lower-orthant probabilities
``Pr(X_1 <= u_1, ..., X_m <= u_m)`` with the separation-of-variables
transform of Genz: the covariance is factored by a pivoted Cholesky
decomposition (pivoting on the smallest expected conditional probability),
and the resulting unit-cube integral is estimated by independently
scrambled Sobol point sets (randomized QMC); the spread across scrambles
gives the reported standard error.

Rank-deficient covariances are supported: coordinates whose conditional
variance vanishes are deterministic functions of the earlier latent
variables, and their constraints are folded into the integration limits of
the last latent variable they depend on.
"""

import functools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import optimize, special
from scipy.stats import qmc

from . import _kernel
from .errors import (
    ConvergenceError,
    DomainError,
    NumericError,
    UnsupportedDimensionError,
)

MAX_DIM = 16

_RANK_TOL = 1e-10
_COEF_TOL = 1e-10
_PSD_TOL = 1e-10
_START_POINTS = 256
_MAX_CELLS = 2_000_000
_BASE_KEY = 0x5EED_D05E


# --------------------------------------------------------------------------
# univariate
# --------------------------------------------------------------------------

def norm_cdf(x):
    """Standard normal CDF of a finite scalar."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"norm_cdf needs a finite argument, got {x!r}")
    return float(special.ndtr(x))


def norm_quantile(p):
    """Inverse of :func:`norm_cdf` on the open unit interval."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"norm_quantile needs 0 < p < 1, got {p!r}")
    return float(special.ndtri(p))


# --------------------------------------------------------------------------
# configuration and specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QmcConfig:
    """Controls the randomized quasi-Monte Carlo estimator.

    ``sample_budget`` is the maximum number of QMC points per
    randomization (a power of two keeps the Sobol sets balanced). When
    ``adaptive`` is true the estimator starts from 256 points and doubles
    until three standard errors fall below ``abs_tol``; Sobol prefixes are
    extensible, so earlier points are reused. Quantile searches always run non-adaptively so that the
    objective is a fixed monotone function of the threshold.
    """

    sample_budget: int = 4096
    randomizations: int = 8
    seed: int = 20_190_521
    abs_tol: float = 1e-4
    adaptive: bool = True

    def __post_init__(self):
        if int(self.sample_budget) < 128:
            raise DomainError("sample_budget must be at least 128")
        if int(self.randomizations) < 4:
            raise DomainError("randomizations must be at least 4")
        if not self.abs_tol > 0:
            raise DomainError("abs_tol must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    def salted(self, salt):
        """Same settings with a seed mixed with ``salt`` (splitmix64 step)."""
        z = (int(self.seed) + 0x9E3779B97F4A7C15 * (int(salt) + 1)) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        return replace(self, seed=z ^ (z >> 31))


DEFAULT_QMC = QmcConfig()


def _check_cov(cov):
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError(f"covariance must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise NumericError("covariance has non-finite entries")
    scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise NumericError("covariance is not symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -_PSD_TOL * max(eig[-1], 0.0) - 1e-300:
        raise NumericError(
            f"covariance is not positive semi-definite (smallest eigenvalue {eig[0]:.3g})"
        )


@dataclass(frozen=True, eq=False)
class MvnSpec:
    """A multivariate normal law given by its mean vector and covariance."""

    mean: np.ndarray
    cov: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise DomainError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise DomainError(
                f"mean has length {mean.size} but covariance has shape {cov.shape}"
            )
        if mean.size > MAX_DIM:
            raise UnsupportedDimensionError(
                f"dimension {mean.size} exceeds the supported maximum of {MAX_DIM}"
            )
        _check_cov(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self):
        return self.mean.size


class MvnResult(NamedTuple):
    estimate: float
    std_error: float


# --------------------------------------------------------------------------
# Genz transform
# --------------------------------------------------------------------------

@dataclass
class _Plan:
    """A prepared integration problem in standardized, reordered form.

    Row ``i`` of ``coef`` expresses a constraint ``coef[i] @ z <= bound[i]``
    on the latent standard normals ``z``; it is enforced when integrating
    latent variable ``step[i]``, the last one it depends on.
    """

    scale: float
    rank: int
    coef: np.ndarray
    bound: np.ndarray
    step: np.ndarray

    @property
    def key(self):
        signs = tuple(bool(s) for s in self.coef[np.arange(len(self.step)), self.step] > 0)
        return (self.rank, tuple(int(s) for s in self.step), signs)


def _trunc_mean(b):
    # E[Z | Z <= b] for a standard normal Z
    return -math.exp(-0.5 * b * b - 0.5 * math.log(2 * math.pi) - float(special.log_ndtr(b)))


def _plan(mean, cov, upper):
    m = mean.size
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (m,))
    if np.any(np.isnan(upper)):
        raise DomainError("integration limits must not be NaN")
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    smax = float(sd.max()) if m else 0.0
    const = sd <= _RANK_TOL * max(smax, 1.0) if smax > 0 else np.ones(m, bool)

    # zero-variance coordinates contribute an indicator
    if np.any(mean[const] > upper[const]):
        return _Plan(0.0, 0, np.zeros((0, 0)), np.zeros(0), np.zeros(0, int))
    keep = ~const & np.isfinite(upper)
    if np.any(~const & (upper == -np.inf)):
        return _Plan(0.0, 0, np.zeros((0, 0)), np.zeros(0), np.zeros(0, int))
    if not keep.any():
        return _Plan(1.0, 0, np.zeros((0, 0)), np.zeros(0), np.zeros(0, int))

    s = sd[keep]
    R = cov[np.ix_(keep, keep)] / np.outer(s, s)
    b = (upper[keep] - mean[keep]) / s
    n = b.size
    L = np.zeros((n, n))
    y = np.zeros(n)
    rank = n
    for k in range(n):
        v = np.diag(R)[k:] - np.einsum("ij,ij->i", L[k:, :k], L[k:, :k])
        if np.any(v < -1e-8):
            raise NumericError("covariance is not positive semi-definite")
        ok = v > _RANK_TOL
        if not ok.any():
            rank = k
            break
        shift = L[k:, :k] @ y[:k]
        bt = np.full(v.size, np.inf)
        bt[ok] = (b[k:][ok] - shift[ok]) / np.sqrt(v[ok])
        j = int(np.argmin(np.where(ok, bt, np.inf)))
        im = k + j
        if im != k:
            R[[k, im], :] = R[[im, k], :]
            R[:, [k, im]] = R[:, [im, k]]
            L[[k, im], :] = L[[im, k], :]
            b[[k, im]] = b[[im, k]]
        lkk = math.sqrt(v[j])
        L[k, k] = lkk
        if k + 1 < n:
            L[k + 1:, k] = (R[k + 1:, k] - L[k + 1:, :k] @ L[k, :k]) / lkk
        y[k] = _trunc_mean(float(bt[j]))

    coef = L[:, :rank].copy()
    step = np.arange(n)
    for i in range(rank, n):
        nz = np.nonzero(np.abs(coef[i]) > _COEF_TOL)[0]
        if nz.size == 0:
            # numerically constant after conditioning; treat as indicator
            if b[i] < 0:
                return _Plan(0.0, 0, np.zeros((0, 0)), np.zeros(0), np.zeros(0, int))
            step[i] = -1
            continue
        step[i] = nz[-1]
    live = step >= 0
    return _Plan(1.0, rank, coef[live], b[live], step[live])


@functools.lru_cache(maxsize=32)
def _scrambled_base(randomizations, dim, n):
    """Linear-matrix-scrambled Sobol nets as 32-bit integers, (R, n, dim)."""
    sets = np.empty((randomizations, n, dim), dtype=np.uint64)
    for r in range(randomizations):
        stream = np.random.Generator(np.random.Philox(key=[_BASE_KEY, r]))
        engine = qmc.Sobol(dim, scramble=True, bits=32, seed=np.random.default_rng(stream.integers(2**63)))
        sets[r] = np.round(engine.random(n) * 2.0**32).astype(np.uint64)
    sets.setflags(write=False)
    return sets


@functools.lru_cache(maxsize=8)
def _sobol_points(seed, randomizations, dim, n):
    """Randomized Sobol point sets in [0, 1), shape (randomizations, n, dim).

    A fixed linear-matrix scramble per randomization is followed by a
    digital shift drawn from a Philox stream keyed by ``seed``, so every
    seed yields an independent randomization of the same nets.
    """
    shift = np.random.Generator(np.random.Philox(key=int(seed))).integers(
        0, 2**32, size=(randomizations, 1, dim), dtype=np.uint64
    )
    pts = (_scrambled_base(randomizations, dim, n) ^ shift).astype(float) * 2.0**-32
    pts.setflags(write=False)
    return pts


def _integrand(plans, w):
    """Genz integrand for plans sharing one structure key; shape (B, N)."""
    step = plans[0].step
    coef = np.ascontiguousarray(np.stack([p.coef for p in plans]))
    bound = np.ascontiguousarray(np.stack([p.bound for p in plans]))
    upper = coef[0, np.arange(step.size), step] > 0
    out = np.empty((len(plans), w.shape[0]))
    _kernel.genz(coef, bound, step.astype(np.int64), upper, np.ascontiguousarray(w), out)
    return out


def _estimate(plans, cfg):
    """Estimate and standard error for a list of plans (same seed for all)."""
    est = np.zeros(len(plans))
    se = np.zeros(len(plans))
    groups = {}
    for idx, plan in enumerate(plans):
        if plan.scale == 0.0:
            continue
        if plan.rank == 0:
            est[idx] = plan.scale
            continue
        if plan.rank == 1:
            up = plan.coef[:, 0] > 0
            hi = np.min(plan.bound[up] / plan.coef[up, 0], initial=np.inf)
            lo = np.max(plan.bound[~up] / plan.coef[~up, 0], initial=-np.inf)
            est[idx] = max(float(special.ndtr(hi) - special.ndtr(lo)), 0.0)
            continue
        groups.setdefault(plan.key, []).append(idx)

    R = int(cfg.randomizations)
    budget = int(cfg.sample_budget)
    for key, members in groups.items():
        dim = key[0] - 1
        points = _sobol_points(int(cfg.seed), R, dim, budget)
        sums = np.zeros((len(members), R))
        count = np.zeros(len(members), dtype=int)
        active = np.arange(len(members))
        lo = 0
        hi = min(budget, _START_POINTS) if cfg.adaptive else budget
        while active.size:
            block = hi - lo
            pts = points[:, lo:hi, :].reshape(-1, dim)
            chunk = max(1, _MAX_CELLS // pts.shape[0])
            for start in range(0, active.size, chunk):
                sel = active[start:start + chunk]
                vals = _integrand([plans[members[i]] for i in sel], pts)
                sums[sel] += vals.reshape(sel.size, R, block).sum(axis=2)
            count[active] = hi
            if hi >= budget:
                break
            means = sums[active] / hi
            err = 3.0 * means.std(axis=1, ddof=1) / math.sqrt(R)
            active = active[err > cfg.abs_tol]
            lo, hi = hi, min(2 * hi, budget)
        means = sums / count[:, None]
        for pos, idx in enumerate(members):
            est[idx] = plans[idx].scale * means[pos].mean()
            se[idx] = plans[idx].scale * means[pos].std(ddof=1) / math.sqrt(R)
    return np.clip(est, 0.0, 1.0), se


# --------------------------------------------------------------------------
# public multivariate API
# --------------------------------------------------------------------------

def mvn_upper_orthant_cdf(spec, upper, cfg=None):
    """``Pr(X <= upper)`` componentwise for ``X ~ spec``.

    Returns an :class:`MvnResult` with the estimate and the standard error
    across randomizations. Identical inputs give bit-identical outputs.
    """
    cfg = cfg or DEFAULT_QMC
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if upper.shape != spec.mean.shape:
        raise DomainError(
            f"upper limits have shape {upper.shape}, expected {spec.mean.shape}"
        )
    est, se = _estimate([_plan(spec.mean, spec.cov, upper)], cfg)
    return MvnResult(float(est[0]), float(se[0]))


def mvn_equicoordinate_cdf(spec, u, cfg=None):
    """``Pr(max_i X_i <= u)``; see :func:`mvn_upper_orthant_cdf`."""
    return mvn_upper_orthant_cdf(spec, np.full(spec.dim, float(u)), cfg)


def mvn_orthant_cdf_many(means, cov, upper, cfg=None):
    """Vectorized orthant probabilities for many problems.

    Parameters
    ----------
    means : array (B, m)
    cov : array (m, m) shared by all problems, or (B, m, m)
    upper : scalar, array (m,) or array (B, m)
    cfg : QmcConfig

    Returns
    -------
    estimates, std_errors : arrays of shape (B,)

    Every problem uses the same randomization shifts, so results for one
    row do not depend on which other rows are in the batch.
    """
    cfg = cfg or DEFAULT_QMC
    means = np.atleast_2d(np.asarray(means, dtype=float))
    B, m = means.shape
    if m > MAX_DIM:
        raise UnsupportedDimensionError(f"dimension {m} exceeds {MAX_DIM}")
    cov = np.asarray(cov, dtype=float)
    shared = cov.ndim == 2
    if shared:
        _check_cov(cov)
    else:
        for c in cov:
            _check_cov(c)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (B, m))
    plans = [
        _plan(means[i], cov if shared else cov[i], upper[i]) for i in range(B)
    ]
    return _estimate(plans, cfg)


def mvn_equicoordinate_quantile(spec, p, cfg=None):
    """Common threshold ``u`` with ``Pr(max_i X_i <= u) = p``.

    The CDF is evaluated with a frozen randomization and a fixed point set, so
    the objective is deterministic and nondecreasing in ``u``; the root is
    refined by Brent's method to 1e-5.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p!r}")
    cfg = replace(cfg or DEFAULT_QMC, adaptive=False)
    sd = np.sqrt(np.diag(spec.cov))
    m = spec.dim

    def objective(u):
        plan = _plan(spec.mean, spec.cov, np.full(m, u))
        return float(_estimate([plan], cfg)[0][0]) - p

    smax = float(sd.max())
    if smax == 0.0:
        raise NumericError("all coordinates are degenerate; quantile undefined")
    # marginal and Bonferroni bounds bracket the root for a zero-mean law
    lo = float(np.max(spec.mean)) + smax * norm_quantile(p) - 1e-3 * smax
    hi = float(np.max(spec.mean)) + smax * norm_quantile(1.0 - (1.0 - p) / m) + 1e-3 * smax
    limit_lo = float(np.min(spec.mean)) - 12.0 * smax
    limit_hi = float(np.max(spec.mean)) + 12.0 * smax
    f_lo, f_hi = objective(lo), objective(hi)
    while f_lo > 0.0 and lo > limit_lo:
        lo = max(lo - smax, limit_lo)
        f_lo = objective(lo)
    while f_hi < 0.0 and hi < limit_hi:
        hi = min(hi + smax, limit_hi)
        f_hi = objective(hi)
    if f_lo > 0.0 or f_hi < 0.0:
        raise ConvergenceError("could not bracket the equicoordinate quantile")
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    return float(optimize.brentq(objective, lo, hi, xtol=1e-5, rtol=1e-12, maxiter=200))
