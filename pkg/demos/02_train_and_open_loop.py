"""Train a small Koopman model on the column and run the two-step open-loop test.

A short run (1000 epochs on a sixth of the campaign) takes about a minute and
shows the workflow, not the accuracy. The acceptance configuration trains
6000 epochs on the full campaign.

Run: python demos/02_train_and_open_loop.py [epochs] [out.json]
"""
import sys

import numpy as np

from koopnmpc.dataset import build_windows, fit_scaling, run_campaign, split_train_val
from koopnmpc.harness import (COLUMN_SAMPLING_RANGES, COLUMN_X_TRANSFORMS, COLUMN_Y_TRANSFORMS,
                              column_sampling_config, run_open_loop_test, two_step_profile)
from koopnmpc.model import init_model
from koopnmpc.plant import COLUMN_NOMINAL_INPUT, column_p_config, column_plant, steady_state, wrap_p_controller
from koopnmpc.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
out = sys.argv[2] if len(sys.argv) > 2 else "demo_model.json"

plant = column_plant()
wrapped = wrap_p_controller(plant, column_p_config())
x_ss = steady_state(plant, COLUMN_NOMINAL_INPUT)

# %% data
ds = run_campaign(wrapped, column_sampling_config(seed=0, n_step_experiments=120, n_steady_trajectories=40),
                  x_guess=x_ss)
spec = fit_scaling(ds, COLUMN_X_TRANSFORMS, COLUMN_Y_TRANSFORMS)
split = split_train_val(build_windows(ds.scaled(spec), 24, 5), 0.8, 32, seed=0)
print(f"{len(split.train)} training / {len(split.val)} validation windows")

# %% train: n_z = 6 latent states for 22 plant states
model = init_model(22, 3, 4, 6, hidden=(16, 10), seed=0, scaling=spec)


def log(row, _):
    if row["epoch"] % 50 == 0:
        print(f"  epoch {row['epoch']:5d}  train {row['train_total']:.3e}  val {row['val_total']:.3e}")


best, history = train(split, model, TrainConfig(epochs=epochs, seed=0), callback=log)
print(f"best epoch {best.meta['best_epoch']}, validation loss {best.meta['best_val']:.3e}")
print("latent eigenvalues:", np.round(best.A, 4))
best.save(out, epoch=best.meta["best_epoch"])

# %% open-loop test on an independent two-step profile
profile = two_step_profile(COLUMN_SAMPLING_RANGES, seed=7, step_time=7200.0)
res = run_open_loop_test(best, wrapped, profile, x_ss, 14400.0)
for name, s, m in zip(["impurity", "production", "inventory"], res.nrmse_single, res.nrmse_multi):
    print(f"  {name:<11} single-step NRMSE {100 * s:6.2f}%   multi-step NRMSE {100 * m:6.2f}%")
res.to_csv("demo_open_loop.csv")
