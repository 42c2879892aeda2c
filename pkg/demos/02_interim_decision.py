# 02_interim_decision.py
# One interim look, six ways to decide the stage-2 size.

import numpy as np

from ssrdose import bayespower as bp
from ssrdose import design, freqpower

doses = np.arange(5.0)
phi = np.full(5, 0.2)
anticipated = np.array([0, 0.25, 0.5, 0.75, 1.0])
weaker = np.array([0, 0.2, 0.4, 0.6, 0.8])

c = design.optimal_contrast(anticipated, phi)
d = design.TwoStageDesign(doses, sigma=2.0, phi1=phi, phi2=phi, n1=60, n2=90,
                          contrasts=c, alpha=0.10, beta=0.20, n_max=170, cp_min=0.30)

# Stage-1 arm means after 60 patients: a real but modest trend.
ybar1 = np.array([0.05, 0.10, 0.35, 0.30, 0.60])
interim = freqpower.InterimState.from_means(ybar1, d)
print(f"T1 = {interim.t1[0]:.3f}, observed contrast effect = {c @ ybar1:.3f}")

# -----------------------------
# Conditional power with three choices of effect
# -----------------------------
for name, delta in (("FQ1 observed", "observed"),
                    ("FQ2 anticipated", [c @ anticipated]),
                    ("FQ3 weaker", [c @ weaker])):
    dec = freqpower.cp_ssr_decide(interim, d, delta)
    print(f"{name:<16} CP(N2)={dec.metric_at_n2:.3f} zone={dec.zone:<11} n2 -> {dec.n2_new:.1f}")

# -----------------------------
# Predictive power under three priors
# -----------------------------
priors = {
    "BY1 flat": bp.FlatPrior(),
    "BY2 anticipated": bp.ConjugatePrior(anticipated, 5.0),
    "BY3 weaker": bp.ConjugatePrior(weaker, 5.0),
}
for name, prior in priors.items():
    dec = bp.pp_ssr_decide(interim, d, prior)
    print(f"{name:<16} PP(N2)={dec.metric_at_n2:.3f} PP(0)={dec.metric_at_zero:.3f} "
          f"zone={dec.zone:<11} n2 -> {dec.n2_new:.1f}")

# Predictive power always sits closer to 1/2 than conditional power at the
# posterior mean: the posterior spread of the effect is averaged in.
post = bp.posterior(bp.FlatPrior(), interim, d.sigma)
grid = np.array([1, 30, 60, 90, 120, 170], dtype=float)
pp = bp.pp_closed_form_single(post, grid, interim, d)
cp = freqpower.conditional_power_single(grid, c @ post.mean, interim, d)
print("\n  n2    CP     PP")
for n, a, b in zip(grid, cp, pp):
    print(f"{n:5.0f} {a:6.3f} {b:6.3f}")

# A general prior goes through the Laplace approximation; with a heavy-tailed
# prior centred on no effect the posterior is pulled toward zero.
def log_cauchy(mu, scale=0.5):
    return float(-np.sum(np.log1p((mu / scale) ** 2)))


lap = bp.posterior(bp.GeneralPrior(log_cauchy), interim, d.sigma)
draws = lap.sample(20_000, np.random.default_rng(1))
mc = bp.pp_monte_carlo(draws, 120, interim, d)
print(f"\nLaplace posterior mean {np.round(lap.mean, 3)}")
print(f"PP(120): closed form {bp.pp_closed_form_single(lap, 120, interim, d):.4f}, "
      f"draw average {mc.estimate:.4f} ± {mc.std_error:.4f}")
