"""Seeded simulation of two-stage adaptive trials and their operating characteristics.

Trials are simulated at the level of per-arm sample means, which have an
exact normal law when the response SD is known.  Random numbers come from a
counter-based generator: the normals of replicate ``i`` at stage ``s`` are a
pure function of ``(master_seed, s, i)``, so results never depend on batch
composition, worker count or how many draws another stage consumed.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import bayespower, freqpower
from .bayespower import ConjugatePrior, FlatPrior
from .errors import DomainError, ValidationError
from .freqpower import FAVORABLE, PROMISING, UNFAVORABLE
from .gaussian import DEFAULT_QMC

METHOD_NAMES = ("FQ1", "FQ2", "FQ3", "BY1", "BY2", "BY3")
_ZONE_NAME = (UNFAVORABLE, FAVORABLE, PROMISING)
_ZONE_CODE = {zone: code for code, zone in enumerate(_ZONE_NAME)}
_MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

def _blocks(k):
    return -(-k // 4)


def stage_normals(master_seed, stage, indices, k):
    """Standard normals of shape ``(len(indices), k)`` for the given replicates.

    Replicate ``i`` owns a fixed window of Philox counter blocks under the key
    ``(master_seed, stage)``; its raw 64-bit outputs are mapped to normals by
    inversion.
    """
    indices = np.asarray(indices, dtype=np.int64)
    stride = _blocks(k)
    out = np.empty((indices.size, k))
    if indices.size == 0:
        return out
    key = [int(master_seed) & _MASK64, int(stage) & _MASK64]
    contiguous = indices.size > 1 and np.all(np.diff(indices) == 1)
    if contiguous or indices.size == 1:
        bg = np.random.Philox(key=key)
        bg.advance(int(indices[0]) * stride)
        raw = bg.random_raw(indices.size * stride * 4).reshape(indices.size, stride * 4)
    else:
        raw = np.empty((indices.size, stride * 4), dtype=np.uint64)
        for row, i in enumerate(indices):
            bg = np.random.Philox(key=key)
            bg.advance(int(i) * stride)
            raw[row] = bg.random_raw(stride * 4)
    u = ((raw[:, :k] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    out[:] = special.ndtri(u)
    return out


class ReplicateStream:
    """Generator-like view on the counter-based stream of one replicate and stage."""

    def __init__(self, master_seed, stage, index):
        self.master_seed, self.stage, self.index = int(master_seed), int(stage), int(index)

    def standard_normal(self, size):
        return stage_normals(self.master_seed, self.stage, [self.index], int(size))[0]


def draw_stage_means(mu, sigma, n, phi, rng_stream):
    """Per-arm sample means ``N(mu_i, sigma**2 / (n phi_i))``.

    ``rng_stream`` is anything with a ``standard_normal(size)`` method.
    """
    mu = np.asarray(mu, dtype=float)
    if not n > 0:
        raise DomainError("stage size must be positive")
    z = np.asarray(rng_stream.standard_normal(mu.size), dtype=float)
    return mu + sigma / np.sqrt(n * np.asarray(phi)) * z


# --------------------------------------------------------------------------
# scenario description
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Method:
    """Interim power calculation: conditional power or predictive power.

    ``assumed_mu`` fixes the effect for FQ2/FQ3; ``prior`` is used by the
    predictive-power methods.
    """

    name: str
    rule: str
    assumed_mu: np.ndarray = None
    prior: object = None


def make_method(name, assumed_mu=None, prior_mu0=None, tau0=None):
    """Build one of the six named methods, checking its required parameters."""
    if name not in METHOD_NAMES:
        raise ValidationError(f"unknown method {name!r}", code="E_METHOD")
    if name == "FQ1":
        return Method(name, "cp")
    if name in ("FQ2", "FQ3"):
        if assumed_mu is None:
            raise ValidationError(f"{name} needs an assumed mean profile", code="E_METHOD_PARAM")
        return Method(name, "cp", assumed_mu=np.asarray(assumed_mu, dtype=float))
    if name == "BY1":
        return Method(name, "pp", prior=FlatPrior())
    if prior_mu0 is None or tau0 is None:
        raise ValidationError(f"{name} needs a conjugate prior (mu0, tau0)", code="E_METHOD_PARAM")
    return Method(name, "pp", prior=ConjugatePrior(prior_mu0, tau0))


@dataclass(frozen=True, eq=False)
class Scenario:
    design: object
    true_mu: np.ndarray
    method: Method
    replicates: int = 1000
    master_seed: int = 20190521
    cfg: object = DEFAULT_QMC
    pp_scan_step: int = 1
    label: str = ""

    def __post_init__(self):
        mu = np.asarray(self.true_mu, dtype=float)
        if mu.shape != (self.design.k,):
            raise ValidationError("true_mu length does not match the arms", code="E_TRUE_MU")
        object.__setattr__(self, "true_mu", mu)
        if int(self.replicates) < 1:
            raise ValidationError("replicates must be positive", code="E_REPLICATES")
        if not 0 <= int(self.master_seed) <= _MASK64:
            raise ValidationError("seed must be a 64-bit unsigned integer", code="E_SEED")
        m = self.method
        if m.assumed_mu is not None and np.asarray(m.assumed_mu).shape != mu.shape:
            raise ValidationError("assumed_mu length does not match the arms", code="E_METHOD_PARAM")
        if m.rule == "pp" and m.prior.kind == "conjugate" and m.prior.mu0.shape != mu.shape:
            raise ValidationError("prior mu0 length does not match the arms", code="E_METHOD_PARAM")


@dataclass(frozen=True)
class TrialOutcome:
    zone: str
    metric_at_n2: float
    final_n2: float
    total_n: float
    rejected: bool


@dataclass(frozen=True)
class SimulationReport:
    pct_unfavorable: float
    pct_favorable: float
    pct_promising: float
    metric_mean: float
    metric_sd: float
    power: float
    mean_ss: float
    mean_incr: float
    replicates: int
    mc_se_power: float


@dataclass(frozen=True, eq=False)
class MetricDistribution:
    values: np.ndarray
    quartiles: tuple = field(default=(math.nan,) * 3)


@dataclass(eq=False)
class _Batch:
    zone: np.ndarray
    metric: np.ndarray
    n2: np.ndarray
    rejected: np.ndarray

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("zone", "metric", "n2", "rejected")))


# --------------------------------------------------------------------------
# trial execution
# --------------------------------------------------------------------------

def _realized_n2(zone, n2_new, design):
    """Stage-2 size actually enrolled: raised sizes are rounded up to integers."""
    up = np.ceil(np.asarray(n2_new) - 1e-9)
    return np.where(zone == _ZONE_CODE[PROMISING], np.maximum(up, design.n2), design.n2)


def _single_decisions(ybar1, t1, scenario):
    design, method = scenario.design, scenario.method
    c = design.contrasts[0]
    target = design.target_power
    if method.rule == "cp":
        delta = ybar1 @ c if method.assumed_mu is None else np.full(t1.size, c @ method.assumed_mu)
        metric = freqpower.cp_single(design.n2, delta, t1, design)
        zone = np.where(metric >= target, 1, 2)
        zone = np.where((metric < design.cp_min) | (delta < 0), 0, zone)
        n2 = np.full(t1.size, float(design.n2))
        prom = zone == 2
        n2[prom] = np.maximum(freqpower.cp_closed_form_n2(delta[prom], t1[prom], design), design.n2)
        return zone, metric, n2

    prec = design.n1 * design.phi1 / design.sigma**2
    if method.prior.kind == "flat":
        post_mean, post_var = ybar1, 1.0 / prec
    else:
        total = method.prior.tau0 + prec
        post_mean = (method.prior.tau0 * method.prior.mu0 + prec * ybar1) / total
        post_var = 1.0 / total
    effect = post_mean @ c
    effect_var = float(np.sum(c**2 * post_var))
    metric = special.ndtr(bayespower._pp_single_arg(effect, effect_var, design.n2, t1, design))
    w1, w2 = design.w1[0], design.w2[0]
    pp0 = special.ndtr((math.sqrt(w1) * t1 - design.z_alpha * math.sqrt(w1 + w2)) / math.sqrt(w2))
    zone = np.full(t1.size, 2)
    zone[(metric >= target) | (pp0 >= target)] = 1
    zone[(metric < design.cp_min) & (pp0 < design.cp_min)] = 0
    n2 = np.full(t1.size, float(design.n2))
    prom = np.nonzero(zone == 2)[0]
    grid = np.arange(1, int(math.floor(design.n_max)) + 1, dtype=float)
    for start in range(0, prom.size, 4096):
        rows = prom[start:start + 4096]
        arg = bayespower._pp_single_arg(effect[rows, None], effect_var, grid[None, :], t1[rows, None], design)
        hit = special.ndtr(arg) >= target
        first = np.where(hit.any(axis=1), grid[np.argmax(hit, axis=1)], design.n_max)
        n2[rows] = np.maximum(np.minimum(first, design.n_max), design.n2)
    return zone, metric, n2


def _multi_decision(ybar1, index, scenario, u_alpha):
    design, method = scenario.design, scenario.method
    cfg = scenario.cfg.salted(index)
    interim = freqpower.InterimState.from_means(ybar1, design)
    if method.rule == "cp":
        source = "observed" if method.assumed_mu is None else design.contrasts @ method.assumed_mu
        dec = freqpower.cp_ssr_decide(interim, design, source, u_alpha, cfg)
    else:
        dec = bayespower.pp_ssr_decide(interim, design, method.prior, u_alpha, cfg, scenario.pp_scan_step)
    return _ZONE_CODE[dec.zone], dec.metric_at_n2, dec.n2_new


def _run_indices(scenario, indices):
    design = scenario.design
    mu = scenario.true_mu
    sd1 = design.sigma / np.sqrt(design.n1 * design.phi1)
    ybar1 = mu + sd1 * stage_normals(scenario.master_seed, 1, indices, design.k)
    t1 = freqpower.stage_statistic(ybar1, design.n1, design.phi1, design.contrasts, design.sigma)

    if design.m == 1:
        zone, metric, n2_new = _single_decisions(ybar1, t1[:, 0], scenario)
        critical = design.z_alpha
    else:
        critical = design.critical_value(scenario.cfg)
        decided = [_multi_decision(ybar1[r], int(i), scenario, critical) for r, i in enumerate(indices)]
        zone = np.array([d[0] for d in decided], dtype=int)
        metric = np.array([d[1] for d in decided])
        n2_new = np.array([d[2] for d in decided])

    n2 = _realized_n2(zone, n2_new, design)
    z2 = stage_normals(scenario.master_seed, 2, indices, design.k)
    ybar2 = mu + design.sigma / np.sqrt(n2[:, None] * design.phi2) * z2
    t2 = freqpower.stage_statistic(ybar2, n2[:, None], design.phi2, design.contrasts, design.sigma)
    stat = freqpower.combine(t1, t2, design.w1, design.w2)
    rejected = stat.max(axis=1) > critical
    return _Batch(zone.astype(np.int8), np.asarray(metric, float), n2, rejected)


def run_trial(scenario, replicate_index):
    """Simulate one replicate end to end."""
    b = _run_indices(scenario, np.array([replicate_index]))
    n2 = float(b.n2[0])
    return TrialOutcome(_ZONE_NAME[int(b.zone[0])], float(b.metric[0]), n2,
                        float(scenario.design.n1 + n2), bool(b.rejected[0]))


def default_workers():
    """Worker count from ``SSRDOSE_THREADS`` (1 when unset)."""
    value = os.environ.get("SSRDOSE_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ValidationError(f"SSRDOSE_THREADS must be an integer, got {value!r}", code="E_THREADS") from None


def _simulate(scenario, workers=None):
    R = int(scenario.replicates)
    workers = default_workers() if workers is None else max(1, int(workers))
    chunk = 10_000 if scenario.design.m == 1 else 250
    bounds = [(s, min(s + chunk, R)) for s in range(0, R, chunk)]
    if scenario.design.m > 1:
        scenario.design.critical_value(scenario.cfg)  # computed once, shared
    if workers == 1 or len(bounds) == 1:
        parts = [_run_indices(scenario, np.arange(a, b)) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_indices, [scenario] * len(bounds),
                                  [np.arange(a, b) for a, b in bounds]))
    return _Batch.concat(parts)


def summarize(batch, design):
    R = batch.zone.size
    pct = [100.0 * np.count_nonzero(batch.zone == code) / R for code in range(3)]
    power = float(np.mean(batch.rejected))
    prom = batch.zone == 2
    incr = float(np.mean(batch.n2[prom] - design.n2)) if prom.any() else 0.0
    return SimulationReport(
        pct_unfavorable=pct[0],
        pct_favorable=pct[1],
        pct_promising=pct[2],
        metric_mean=float(np.mean(batch.metric)),
        metric_sd=float(np.std(batch.metric, ddof=1)) if R > 1 else 0.0,
        power=power,
        mean_ss=float(design.n1 + np.mean(batch.n2)),
        mean_incr=incr,
        replicates=R,
        mc_se_power=math.sqrt(power * (1 - power) / R),
    )


MIN_STUDY_REPLICATES = 100


def _require_study_size(scenario):
    if int(scenario.replicates) < MIN_STUDY_REPLICATES:
        raise ValidationError(f"a study needs at least {MIN_STUDY_REPLICATES} replicates", code="E_REPLICATES")


def run_study(scenario, workers=None, return_metrics=False):
    """Simulate all replicates and aggregate the operating characteristics.

    With ``return_metrics`` the per-replicate interim metric is returned too.
    """
    _require_study_size(scenario)
    batch = _simulate(scenario, workers)
    report = summarize(batch, scenario.design)
    return (report, batch.metric) if return_metrics else report


def metric_distribution(scenario, workers=None):
    """Per-replicate CP/PP at the planned stage-2 size plus its quartiles."""
    _require_study_size(scenario)
    values = _simulate(scenario, workers).metric
    return MetricDistribution(values, tuple(float(q) for q in np.quantile(values, [0.25, 0.5, 0.75])))
