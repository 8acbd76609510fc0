"""The distillation column surrogate and a short sampling campaign.

Run: python demos/01_column_and_sampling.py
"""
import numpy as np

from koopnmpc.dataset import build_windows, fit_scaling, run_campaign
from koopnmpc.harness import COLUMN_X_TRANSFORMS, COLUMN_Y_TRANSFORMS, column_sampling_config
from koopnmpc.plant import (COLUMN_NOMINAL_INPUT, column_p_config, column_plant, integrate_step, steady_state,
                            wrap_p_controller)

# %% steady state at the nominal input
plant = column_plant()
x_ss = steady_state(plant, COLUMN_NOMINAL_INPUT)
imp, D, M_r = plant.output_map(x_ss)
print(f"nominal input {COLUMN_NOMINAL_INPUT}: impurity {imp * 1e6:.0f} ppm, D = {D:.2f} mol/s, M_r = {M_r:.2f} kmol")

# %% the reboiler inventory integrates when the drain is off balance
u = COLUMN_NOMINAL_INPUT + np.array([0.0, 0.0, 0.0, -2.0])
x = x_ss.copy()
for k in range(4):
    x = integrate_step(plant, x, u, 300.0)
    print(f"  drain 23 mol/s, t = {5 * (k + 1):2d} min: M_r = {x[-1]:.3f} kmol")

# %% with the P-controller on the drain, the 4th input becomes the level setpoint
wrapped = wrap_p_controller(plant, column_p_config())
x = x_ss.copy()
x[-1] = 33.0
for k in range(4):
    x = integrate_step(wrapped, x, COLUMN_NOMINAL_INPUT + np.array([0, 0, 0, 5.0]), 300.0)
    print(f"  level setpoint 30 kmol, t = {5 * (k + 1):2d} min: M_r = {x[-1]:.3f} kmol")

# %% a small random-step campaign (the full one has 800 steps and 500 steady runs)
cfg = column_sampling_config(seed=0, n_step_experiments=20, n_steady_trajectories=5)
ds = run_campaign(wrapped, cfg, x_guess=x_ss)
print(f"campaign: {len(ds)} snapshots in {ds.n_trajectories} trajectories")
print("realized drain range:", ds.u[:, 3].min().round(2), "-", ds.u[:, 3].max().round(2))

# %% scaling: log10 on compositions and impurity, min-max everywhere
spec = fit_scaling(ds, COLUMN_X_TRANSFORMS, COLUMN_Y_TRANSFORMS)
sds = ds.scaled(spec)
print("scaled y range per channel:", sds.y.min(axis=0).round(3), sds.y.max(axis=0).round(3))
windows = build_windows(sds, 24, 5)
print(f"{len(windows)} training windows of 24 snapshots")
