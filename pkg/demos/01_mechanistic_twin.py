"""
Mechanistic twin
================

Walk through the low-fidelity settler model that produces all the synthetic
data: equilibria along the throughput range, one 1 s pretraining segment and
a full stepped trajectory with measurement noise.

Run with ``python demos/01_mechanistic_twin.py``.
"""

import numpy as np

from settlerpinn import mechanistic as mm
from settlerpinn.core import SettlerConfig

cfg = SettlerConfig()
M3H = 1.0 / 3600.0

# %% Equilibria: the heavy phase level drops and the DPZ grows with throughput
print("q_in [m3/h]   h_HP [mm]   h_DP [mm]")
for q in (0.75, 1.0, 1.5, 2.0, 2.25):
    s = mm.steady_state(q * M3H, cfg)
    print(f"{q:10.2f} {s.h_hp * 1e3:11.1f} {s.h_dp * 1e3:11.1f}")

# %% One pretraining segment: 1 s at 0.1 s resolution, flows held constant
ds = mm.generate_pretrain_dataset(3, cfg, seed=0)
print("\nsegment 0 h_DP over 1 s [mm]:", np.round(ds.grid["h_dp"][0] * 1e3, 3))
print("outlet balance exact:", np.array_equal(ds.grid["q_top"], ds.q_in[:, None] - ds.grid["q_bot"]))

# %% A stepped inlet schedule, as used for fine-tuning and testing
sched = mm.reference_schedule(1)
traj = mm.simulate_trajectory(mm.steady_state(sched[0], cfg), sched, cfg, noise_h=0.002, noise_q=5e-7, seed=0)
levels = np.unique(np.round(sched / M3H, 3))
print(f"\ntrajectory 1: {len(traj)} s, inlet levels {levels} m3/h")
for k in range(0, len(traj), 100):
    print(f"  t={traj.tau[k]:5.0f} s  q_in={traj.q_in[k] / M3H:4.2f} m3/h  "
          f"h_DP true {traj.true('h_dp')[k] * 1e3:5.1f} mm, measured {traj.h_dp[k] * 1e3:5.1f} mm")

# %% Axial DPZ profile at the detection positions (outlet height is h_4_3)
det = mm.detection_heights(traj.true("h_dp")[-1:])
print("\nprofile at the end [mm]:", {k: round(float(v[0]) * 1e3, 1) for k, v in det.items()})
