"""
State estimation
================

Filter outlet-flow measurements with the ensemble from
``02_train_ensemble.py``: search an initial state, run one extended Kalman
filter per member with the shared spread-based process noise, then map the
estimated average DPZ height to the outlet with the small regression net.
"""

import sys
import warnings
from pathlib import Path

import numpy as np

from settlerpinn import estimation as es
from settlerpinn import io
from settlerpinn import mechanistic as mm
from settlerpinn.core import SettlerConfig

warnings.simplefilter("ignore", RuntimeWarning)
cfg = SettlerConfig()
HS, QS = cfg.scaling.h_scale, cfg.scaling.q_scale
models = io.load_ensemble(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_ensemble"))

sched = mm.reference_schedule(1)
traj = mm.simulate_trajectory(mm.steady_state(sched[0], cfg), sched, cfg, noise_h=0.002, noise_q=5e-7, seed=7)
H = np.column_stack([traj.true("h_hp"), traj.true("h_dp")])
u = traj.q_in / QS
y = np.column_stack([traj.q_bot, traj.q_top]) / QS

# %% Filter versus open loop from the same searched start
est = es.run_filter(models, u, y, cfg, seed=0)
x0 = est.mean[0]
ro = es.chain_forward(models, x0, u[:-1], bounds=es.state_bounds(cfg))
print(f"searched x0 error: {(x0 * HS - H[0]) * 1e3} mm")
for name, m in (("filter", est.mean), ("open loop", ro.mean)):
    err = m * HS - H
    print(f"{name:9s} RMSE h_HP {np.sqrt((err[:, 0] ** 2).mean()) * 1e3:.2f} mm, "
          f"h_DP {np.sqrt((err[:, 1] ** 2).mean()) * 1e3:.2f} mm")
conv = io.convergence_step(est.mean[:, 1] * HS - H[:, 1], 0.005)
print("h_DP within 5 mm for good from step", conv)

# %% Outlet DPZ height from the average
det = mm.detection_heights(traj.true("h_dp"), noise=0.001, seed=1)
fit = es.outlet_dpz_train(traj.true("h_dp"), det["h_4_3"], seed=0)
pred = es.outlet_dpz_predict(fit.model, est.mean[:, 1] * HS)
truth = mm.detection_heights(traj.true("h_dp"))["h_4_3"]
print(f"outlet net: val RMSE {fit.val_rmse * 1e3:.2f} mm after {fit.epochs} epochs; "
      f"outlet from filtered average RMSE {np.sqrt(((pred.values - truth) ** 2).mean()) * 1e3:.2f} mm")
