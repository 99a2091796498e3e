"""
Walk through a single transmission: simulate, look at what the receiver
sees, and run the approximate filter on it.
"""
import numpy as np

from voxcomm.demod import demod_partitioned_approx
from voxcomm.model import ChannelKind
from voxcomm.reference import estimate_references, time_grid
from voxcomm.scenario import ScenarioConfig
from voxcomm.ssa import extract_observations, output_event_mask, simulate

######## the 5x5x5 medium, two receiver voxels, no receptor diffusion ########
cfg = ScenarioConfig.from_yaml("cube.yaml")
model = cfg.build_model()
print(model.n_slots, "state slots,", len(model.channels), "reaction channels")

######## reference signals: mean signalling molecules per receiver voxel ########
grid = time_grid(cfg.t_end, cfg.dt_ref)
refs = estimate_references(model, "alpha", grid, n_runs=200, seed=1001)
for k in range(model.K):
    print(f"symbol {k}: mean molecules at t=2.5 ->", np.round(refs.at([2.5])[k, :, 0], 2))

######## a few runs of each symbol ########
g = model.channels_of(ChannelKind.ACTIVATION)[0].constant
times = np.arange(0.25, 2.51, 0.25)
mask = output_event_mask(model)
for k in range(model.K):
    print(f"\nsent {k}")
    for rep in range(6):
        tr = simulate(model, k, cfg.t_end, seed=7, replicate=rep, event_mask=mask)
        obs = extract_observations(tr, model)
        out = demod_partitioned_approx(obs, refs, g, model.receiver.M, None, times)
        z = np.round(out.Z[:, -1], 2)
        if len(obs.times):
            busy = out
        print(f"  run {rep}: {len(obs.times):3d} receptor events, Z(2.5) = {z}, decided {out.decision[-1]}")

# filter trace of the last run that saw any events
print("\n  t     Z0       Z1     decision")
for i, t in enumerate(times):
    print(f"  {t:4.2f} {busy.Z[0, i]:8.2f} {busy.Z[1, i]:8.2f}   {busy.decision[i]}")
