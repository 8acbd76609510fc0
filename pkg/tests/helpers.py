"""Shared fixtures: an exact Koopman model of the RK4-discretized scalar linear plant."""
import numpy as np

from koopnmpc.dataset import ChannelScaling, ScalingSpec
from koopnmpc.model import KoopmanModel, Mlp
from koopnmpc.plant import integrate_step_sensitivity


def unit_scaling(x_hi=2.0, u_hi=1.0):
    """Zero-offset linear scaling for a one-state, one-output, one-input plant."""
    return ScalingSpec(ChannelScaling(["linear"], [0.0], [x_hi]), ChannelScaling(["linear"], [0.0], [x_hi]),
                       ChannelScaling(["linear"], [0.0], [u_hi]))


def exact_koopman(plant, scaling, dt=1.0, n_sub=10):
    """Koopman model reproducing the RK4-discretized linear plant in scaled units."""
    _, Phi, Gam = integrate_step_sensitivity(plant, [0.0], [0.0], dt, n_sub)
    rx = scaling.x.hi[0] - scaling.x.lo[0]
    ru = scaling.u.hi[0] - scaling.u.lo[0]
    enc = Mlp([np.array([[1.0, 0.0]])], [np.zeros(1)])
    dec = Mlp([np.array([[1.0], [1.0]])], [np.zeros(2)])
    return KoopmanModel(enc, dec, np.array([Phi[0, 0]]), np.array([[Gam[0, 0] * ru / rx]]), 1, 1, dt,
                        scaling=scaling)
