"""
Analytic BER from the linear noise approximation on the 2x2x2 cube,
next to a modest simulation of the same filter.
"""
import numpy as np

from voxcomm.harness import cube2_lna, lna_validation

times = np.array([5.0, 10.0, 15.0, 20.0])
cmp = lna_validation(cube2_lna(0.2, n_runs_ber=400), times)

for k in range(2):
    lo, hi = cmp.empirical.ci(k)
    print(f"\nsymbol {k}")
    print("   t   LNA BER   SSA BER   95% CI")
    for i, t in enumerate(times):
        print(f"{t:5.1f}  {cmp.lna_ber[k, i]:.4f}    {cmp.empirical.ber(k)[i]:.4f}    "
              f"[{lo[i]:.3f}, {hi[i]:.3f}]")

rel = np.abs(cmp.lna_mean - cmp.ssa_mean) / np.abs(cmp.ssa_mean)
print("\nlargest relative gap in Z means:", rel.max().round(4))
