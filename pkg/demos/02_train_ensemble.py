"""
Two-stage training
==================

Pretrain a few PINN members on mechanistic segments, fine-tune them on a
noisy twin trajectory and roll them out open loop on an unseen schedule.
The trained ensemble is saved for ``03_state_estimation.py``.

Four members at desk scale take a few minutes on one core.
"""

import sys
import time
import warnings
from pathlib import Path

import numpy as np

from settlerpinn import estimation as es
from settlerpinn import io
from settlerpinn import mechanistic as mm
from settlerpinn import training as tr
from settlerpinn.core import SettlerConfig

warnings.simplefilter("ignore", RuntimeWarning)
cfg = SettlerConfig()
HS, QS = cfg.scaling.h_scale, cfg.scaling.q_scale
n_members = int(sys.argv[1]) if len(sys.argv) > 1 else 4
out_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("demo_ensemble")


def twin(i, noise_h=0.0, noise_q=0.0, seed=0):
    sched = mm.reference_schedule(i)
    return mm.simulate_trajectory(mm.steady_state(sched[0], cfg), sched, cfg,
                                  noise_h=noise_h, noise_q=noise_q, seed=seed)


# %% Data: simulated segments for pretraining, a noisy trajectory for fine-tuning
data = tr.PipelineData(
    tr.rows_from_segments(mm.generate_pretrain_dataset(200, cfg, seed=1), cfg),
    tr.rows_from_trajectory(twin(3, 0.002, 5e-7, seed=100), cfg),
    tr.sample_collocation(2000, 200, cfg, seed=2),
    tr.sample_collocation(2000, 200, cfg, seed=3),
)

# %% Train
t0 = time.perf_counter()
members = tr.train_ensemble(n_members, data, cfg)
print(f"trained {len(members)} members in {time.perf_counter() - t0:.0f} s")
for r in members:
    pre = r.histories["pretrain"]
    print(f"  seed {r.seed}: pretrain loss {pre[0]['total']:.2e} -> {pre[-1]['total']:.2e}, "
          f"fine-tune -> {r.histories['finetune'][-1]['total']:.2e}")

# %% Open-loop rollout on trajectory 1, chained 1 s at a time
test = twin(1)
H = np.column_stack([test.true("h_hp"), test.true("h_dp")])
models = [r.model for r in members]
ro = es.chain_forward(models, H[0] / HS, test.q_in[:-1] / QS, bounds=es.state_bounds(cfg))
rmse = np.sqrt(((ro.mean * HS - H) ** 2).mean(axis=0)) * 1e3
print(f"rollout RMSE: h_HP {rmse[0]:.2f} mm, h_DP {rmse[1]:.2f} mm")

io.save_ensemble(out_dir, models, {"stage": "finetune", "kind": "pinn"})
print("saved to", out_dir)
