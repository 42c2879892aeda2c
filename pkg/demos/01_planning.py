# 01_planning.py
# Planning a five-arm dose-finding trial: contrasts, fixed-design power, sample sizes.

import numpy as np

from ssrdose import design, gaussian

doses = np.arange(5.0)
phi = np.full(5, 0.2)
sigma, alpha, beta = 2.0, 0.10, 0.20

anticipated = np.array([0, 0.25, 0.5, 0.75, 1.0])
weaker = np.array([0, 0.2, 0.4, 0.6, 0.8])

# -----------------------------
# One trend contrast
# -----------------------------
c = design.optimal_contrast(anticipated, phi)
print("linear contrast:", np.round(c, 3) + 0.0)

# The normal reference is the textbook formula; the t reference uses a
# noncentral t with N - k degrees of freedom, which is what most planning
# software reports.
for ref in ("normal", "t"):
    n = design.single_sample_size(c @ anticipated, c, phi, sigma, alpha, beta,
                                  rounding="per_arm_equal", reference=ref)
    p = design.single_power(c @ weaker, c, phi, sigma, n, alpha, reference=ref)
    n_weak = design.single_sample_size(c @ weaker, c, phi, sigma, alpha, beta,
                                       rounding="per_arm_equal", reference=ref)
    print(f"[{ref:>6}] N={n}, power if the effect is weaker {p:.3f}, N needed then {n_weak}")

# -----------------------------
# Four candidate shapes, max-contrast test
# -----------------------------
shapes = [
    design.shape_profile("linear", doses),
    design.shape_profile("emax", doses, ed50=0.3),
    design.shape_profile("exponential", doses, delta=0.3),
    design.shape_profile("sigmoid_emax", doses, ed50=1, h=3),
]
C = np.array([design.optimal_contrast(s, phi) for s in shapes])
print("\ncontrast matrix:")
for s, row in zip(shapes, C):
    print(f"  {s.label:<13}", " ".join(f"{v + 0.0:+.3f}" for v in np.round(row, 3)))

print("\ncorrelation between contrast statistics:")
print(np.round(design.contrast_correlation(C, phi), 3))

# The familywise critical value replaces z_{1-alpha}; it is the equicoordinate
# quantile of the correlated statistics and costs a bit of power.
u = design.fixed_critical_value(C, phi, alpha, gaussian.DEFAULT_QMC)
print(f"\nU_alpha = {u:.4f} (z = {gaussian.norm_quantile(1 - alpha):.4f})")

for label, mu in (("anticipated", anticipated), ("weaker", weaker)):
    p = design.mcp_power(mu, C, phi, sigma, 170, u)
    n = design.mcp_sample_size(mu, C, phi, sigma, alpha, beta, rounding="per_arm_equal", u_alpha=u)
    print(f"{label:>11}: power at N=170 {p:.3f}, N for 80% power {n}")
