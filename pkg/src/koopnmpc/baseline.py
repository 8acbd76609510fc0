"""Full-order reference NMPC: single shooting on the plant ODE.

The decision vector holds the scaled inputs ``u_0 .. u_{N-1}`` only. The
state trajectory comes from simulating the plant, and its derivatives from
forward sensitivities of the RK4 step. Cost, bounds and tolerances are
those of :class:`koopnmpc.nmpc.OcpConfig`, evaluated on the true ``[x, y]``
scaled with the dataset's scaling.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import ScalingSpec
from .nmpc import OcpConfig, SolveResult, StageTerms, StepInfo
from .plant import PlantModel, integrate_step, integrate_step_sensitivity
from .sqp import Linearization, run_sqp

logger = logging.getLogger(__name__)


def sensitivity_rollout(plant: PlantModel, x0, U, dt: float, n_sub: int = 10):
    """Stage-end states and their input sensitivities under zero-order hold.

    Returns ``(X, S)``: ``X[k]`` is ``x_{k+1}`` and ``S[k, :, j, :]`` is
    ``d x_{k+1} / d u_j`` (zero for ``j > k``).
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    N, nu = U.shape
    x = np.array(x0, dtype=float)
    nx = x.size
    X = np.empty((N, nx))
    S = np.zeros((N, nx, N, nu))
    prev = np.zeros((nx, N, nu))
    for k in range(N):
        x, Phi, Gam = integrate_step_sensitivity(plant, x, U[k], dt, n_sub)
        cur = np.einsum("ab,bjc->ajc", Phi, prev)
        cur[:, k, :] += Gam
        X[k] = x
        S[k] = cur
        prev = cur
    return X, S


def simulate_inputs(plant: PlantModel, x0, U, dt: float, n_sub: int = 10):
    x = np.array(x0, dtype=float)
    X = np.empty((len(U), x.size))
    for k, u in enumerate(U):
        x = integrate_step(plant, x, u, dt, n_sub)
        X[k] = x
    return X


@dataclass
class ShootingOcp:
    plant: PlantModel
    scaling: ScalingSpec
    config: OcpConfig
    x0: np.ndarray
    dt: float = 300.0
    n_sub: int = 10
    setpoints: Optional[list] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (self.plant.n_x,):
            raise ValueError("x0 does not match the plant")
        for tr in self.scaling.u.transforms:
            if tr != "linear":
                raise ValueError("single shooting needs linearly scaled inputs")
        self.stage = StageTerms(self.config, self.scaling, self.plant.n_x, self.plant.n_y, self.setpoints)
        b = self.config.input_bounds
        self.u_lo = self.scaling.u.scale(b[:, 0])
        self.u_hi = self.scaling.u.scale(b[:, 1])

    @property
    def N(self):
        return self.config.N_c

    @property
    def n_w(self):
        return self.N * self.plant.n_u

    def raw_inputs(self, w):
        return self.scaling.u.unscale(np.asarray(w, dtype=float).reshape(self.N, self.plant.n_u))

    def stage_values(self, X):
        Y = np.array([self.plant.output_map(x) for x in X])
        return self.scaling.scale_xy(X, Y), Y

    def stage_derivs(self, X, S):
        """Channel derivatives ``(N, n_channels, n_w)`` w.r.t. the scaled inputs."""
        nx = self.plant.n_x
        N = self.N
        du = (self.scaling.u.hi - self.scaling.u.lo)
        Sf = (S * du).reshape(N, nx, -1)
        ch = self.stage.channels
        out = np.empty((N, ch.size, Sf.shape[-1]))
        for k in range(N):
            x = X[k]
            dsx = self.scaling.x.dscale(x)
            need_y = ch >= nx
            if need_y.any():
                y = self.plant.output_map(x)
                Hy = self.scaling.y.dscale(y)[:, None] * self.plant.output_jac(x)
            for i, c in enumerate(ch):
                out[k, i] = dsx[c] * Sf[k, c] if c < nx else Hy[c - nx] @ Sf[k]
        return out


class _ShootingProblem:
    def __init__(self, ocp: ShootingOcp):
        self.ocp = ocp
        self.lo = np.tile(ocp.u_lo, ocp.N)
        self.hi = np.tile(ocp.u_hi, ocp.N)

    def u_bounds(self, w):
        return self.lo - w, self.hi - w

    def project(self, w):
        return np.clip(w, self.lo, self.hi)

    def expand(self, w, du, lin):
        return du

    def evaluate(self, w):
        o = self.ocp
        X = simulate_inputs(o.plant, o.x0, o.raw_inputs(w), o.dt, o.n_sub)
        v, _ = o.stage_values(X)
        return float(np.sum(o.stage.residuals(v) ** 2)), o.stage.constraints(v).ravel(), 0.0

    def linearize(self, w):
        o = self.ocp
        X, S = sensitivity_rollout(o.plant, o.x0, o.raw_inputs(w), o.dt, o.n_sub)
        v, _ = o.stage_values(X)
        dv = o.stage_derivs(X, S)
        r = o.stage.residuals(v)
        L = o.stage.residual_jac(dv).reshape(-1, o.n_w)
        c = o.stage.constraints(v).ravel()
        C = o.stage.constraint_jac(dv).reshape(-1, o.n_w)
        return Linearization(2.0 * L.T @ L, 2.0 * L.T @ r.ravel(), C, c, float(np.sum(r ** 2)), c, 0.0, 0.0)


def solve_fullorder(ocp: ShootingOcp, guess=None) -> SolveResult:
    """SQP over the scaled inputs with the nmpc tolerances."""
    problem = _ShootingProblem(ocp)
    if guess is None:
        guess = np.tile(0.5 * (ocp.u_lo + ocp.u_hi), ocp.N)
    guess = np.asarray(guess, dtype=float).ravel()
    if guess.shape != (ocp.n_w,):
        raise ValueError("guess does not match the decision layout")
    out = run_sqp(problem, problem.project(guess), ocp.config.sqp_options())
    U = out.w.reshape(ocp.N, ocp.plant.n_u)
    res = SolveResult(U.copy(), ocp.scaling.u.unscale(U), np.zeros((ocp.N, 0)), out.f, out.stationarity,
                      out.feasibility, out.soft_violation, out.iterations, out.wall_time, out.status, out.w)
    logger.debug(json.dumps(res.log_record("ideal")))
    return res


class IdealController:
    """Receding-horizon wrapper around :func:`solve_fullorder` (same interface as the Koopman one)."""

    name = "ideal"

    def __init__(self, plant: PlantModel, scaling: ScalingSpec, config: OcpConfig, dt: float = 300.0,
                 n_sub: int = 10):
        self.plant, self.scaling, self.config = plant, scaling, config
        self.dt, self.n_sub = dt, n_sub
        self.reset()

    def reset(self, u_prev=None):
        self.previous: Optional[SolveResult] = None
        self.u_prev = None if u_prev is None else np.asarray(u_prev, dtype=float)

    def step(self, x, y, setpoints=None):
        lo, hi = self.config.input_bounds[:, 0], self.config.input_bounds[:, 1]
        try:
            ocp = ShootingOcp(self.plant, self.scaling, self.config, x, self.dt, self.n_sub, setpoints)
            if self.previous is not None:
                U = self.previous.u_scaled
                guess = np.vstack([U[1:], U[-1:]])
            elif self.u_prev is not None:
                guess = np.tile(self.scaling.u.scale(self.u_prev), (ocp.N, 1))
            else:
                guess = None
            res = solve_fullorder(ocp, guess)
            if not np.all(np.isfinite(res.u)):
                raise FloatingPointError("non-finite solution")
        except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as err:
            held = self.u_prev if self.u_prev is not None else 0.5 * (lo + hi)
            logger.warning("solver failure, holding previous input: %s", err)
            return np.clip(held, lo, hi), StepInfo(None, True, str(err))
        self.previous = res
        self.u_prev = np.clip(res.u[0], lo, hi)
        return self.u_prev.copy(), StepInfo(res, False)
