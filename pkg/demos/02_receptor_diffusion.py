"""
How much does receptor mobility cost? Small BER sweep over d_r at a
fraction of the full run counts.
"""
from voxcomm.harness import base_config, run_scenario

scale = 0.3
for d_r in (0.0, 0.5, 1.0):
    cfg = base_config(name=f"demo_dr{d_r:g}", d_r=d_r, decision_times=(1.0, 2.5),
                      n_runs_ber=int(300 * scale), n_runs_ref=int(500 * scale))
    res = run_scenario(cfg, cache_dir="demo-cache")
    row = [f"{res.at(k, 2.5)[0]:.3f}" for k in range(2)]
    print(f"d_r={d_r:<4g} filter={cfg.demod:<12} BER(2.5s) per symbol: {row}")

# expect the d_r = 0 row lowest, but at this scale the intervals are wide
