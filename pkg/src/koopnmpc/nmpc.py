"""Condensed NMPC over a Koopman model.

The decision vector is ``w = [u_0 .. u_{N-1}, z_1 .. z_N]`` in scaled
units, with ``z_0 = encode(x0, y0)`` held as a parameter. The dynamics
rows ``z_{k+1} - A z_k - B u_k`` are linear, so their Jacobian is a fixed
set of constant blocks. Cost and path constraints act on the decoded
vector ``[x, y]`` of each stage, so their derivatives only touch the
matching ``z_{k+1}`` block.

Two solver variants share one SQP core (:mod:`koopnmpc.sqp`):

* ``tailored`` reuses the cached constant blocks and differentiates the
  decoder per stage in reverse mode;
* ``generic_dense`` rebuilds a dense finite-difference Jacobian of the
  full residual map at every iteration and eliminates the latent states
  by a dense linear solve.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import ScalingSpec
from .model import KoopmanModel
from .sqp import Linearization, SqpOptions, run_sqp

logger = logging.getLogger(__name__)


class AssemblyError(FloatingPointError):
    pass


@dataclass
class OcpConfig:
    """Horizon, stage cost, path bounds, input box and solver tolerances.

    ``cost`` holds ``(channel, weight, setpoint)`` and ``bounds`` holds
    ``(channel, lo, hi)`` (either bound may be ``None``). A channel indexes
    the stacked vector ``[x, y]``. Weights and values are in raw units;
    linear channels have their weights converted to scaled units by the
    squared channel range, then all weights are normalized to a largest
    value of 1.
    """

    input_bounds: np.ndarray
    N_c: int = 24
    cost: list = field(default_factory=list)
    bounds: list = field(default_factory=list)
    opt_tol: float = 1e-5
    feas_tol: float = 1e-3
    max_iter: int = 200
    soft_penalty: float = 1e4
    levenberg: float = 1e-8

    def __post_init__(self):
        self.input_bounds = np.asarray(self.input_bounds, dtype=float)
        if self.N_c < 1:
            raise ValueError("N_c must be >= 1")
        if self.input_bounds.ndim != 2 or self.input_bounds.shape[1] != 2:
            raise ValueError("input_bounds must be (n_u, 2)")
        if np.any(self.input_bounds[:, 0] > self.input_bounds[:, 1]):
            raise ValueError("input bounds with lo > hi")
        for ch, wgt, _ in self.cost:
            if wgt < 0:
                raise ValueError(f"negative weight on channel {ch}")
        for ch, lo, hi in self.bounds:
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"path bound on channel {ch} with lo > hi")

    def sqp_options(self) -> SqpOptions:
        return SqpOptions(self.opt_tol, self.feas_tol, self.max_iter, self.soft_penalty, self.levenberg)

    def to_dict(self):
        return {"N_c": self.N_c, "cost": [list(c) for c in self.cost], "bounds": [list(b) for b in self.bounds],
                "input_bounds": self.input_bounds.tolist(), "opt_tol": self.opt_tol, "feas_tol": self.feas_tol,
                "max_iter": self.max_iter, "soft_penalty": self.soft_penalty, "levenberg": self.levenberg}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cost"] = [tuple(c) for c in d.get("cost", [])]
        d["bounds"] = [tuple(b) for b in d.get("bounds", [])]
        return cls(**d)


def _channel_scaler(scaling: Optional[ScalingSpec], n_x: int, ch: int):
    """``(scale, unscale, is_log, range)`` for one ``[x, y]`` channel."""
    if scaling is None:
        return (lambda v: float(v)), (lambda s: float(s)), False, 1.0
    cs, i = (scaling.x, ch) if ch < n_x else (scaling.y, ch - n_x)
    is_log = cs.transforms[i] == "log10"

    def scale(v):
        return float((np.log10(v + 1e-12) if is_log else v) - cs.lo[i]) / float(cs.hi[i] - cs.lo[i])

    def unscale(s):
        t = s * (cs.hi[i] - cs.lo[i]) + cs.lo[i]
        return float(10.0 ** t - 1e-12) if is_log else float(t)

    return scale, unscale, is_log, float(cs.hi[i] - cs.lo[i])


class StageTerms:
    """Least-squares stage cost and one-sided constraint rows on a scaled ``[x, y]`` vector."""

    def __init__(self, config: OcpConfig, scaling: Optional[ScalingSpec], n_x: int, n_y: int,
                 setpoints: Optional[Sequence] = None):
        n = n_x + n_y
        self.n_x, self.n_y = n_x, n_y
        idx, w, tgt = [], [], []
        for j, (ch, wgt, sp_val) in enumerate(config.cost):
            if not 0 <= ch < n:
                raise ValueError(f"cost channel {ch} out of range")
            if setpoints is not None and setpoints[j] is not None:
                sp_val = setpoints[j]
            scale, _, is_log, rng = _channel_scaler(scaling, n_x, ch)
            s = scale(sp_val)
            if scaling is not None and not 0.0 <= s <= 1.0:
                warnings.warn(f"setpoint {sp_val} on channel {ch} outside the scaled range, clamped")
                s = min(max(s, 0.0), 1.0)
            idx.append(ch)
            w.append(wgt if is_log else wgt * rng ** 2)
            tgt.append(s)
        w = np.asarray(w, dtype=float)
        if w.size and w.max() > 0:
            w = w / w.max()
        self.cost_idx = np.asarray(idx, dtype=int)
        self.cost_sqrtw = np.sqrt(w)
        self.cost_target = np.asarray(tgt, dtype=float)
        cidx, sign, bound = [], [], []
        for ch, lo, hi in config.bounds:
            if not 0 <= ch < n:
                raise ValueError(f"bound channel {ch} out of range")
            scale = _channel_scaler(scaling, n_x, ch)[0]
            if lo is not None:
                cidx.append(ch); sign.append(-1.0); bound.append(scale(lo))
            if hi is not None:
                cidx.append(ch); sign.append(1.0); bound.append(scale(hi))
        self.con_idx = np.asarray(cidx, dtype=int)
        self.con_sign = np.asarray(sign, dtype=float)
        self.con_bound = np.asarray(bound, dtype=float)
        # channels that need derivatives, and where each term reads from them
        self.channels = np.unique(np.concatenate([self.cost_idx, self.con_idx])).astype(int)
        pos = {c: i for i, c in enumerate(self.channels.tolist())}
        self.cost_pos = np.array([pos[c] for c in self.cost_idx.tolist()], dtype=int)
        self.con_pos = np.array([pos[c] for c in self.con_idx.tolist()], dtype=int)

    @property
    def n_cost(self):
        return self.cost_idx.size

    @property
    def n_con(self):
        return self.con_idx.size

    def residuals(self, v):
        return self.cost_sqrtw * (v[..., self.cost_idx] - self.cost_target)

    def constraints(self, v):
        return self.con_sign * (v[..., self.con_idx] - self.con_bound)

    def residual_jac(self, dv):
        """Cost-residual Jacobian from channel derivatives ``dv[..., channel, var]``."""
        return self.cost_sqrtw[:, None] * dv[..., self.cost_pos, :]

    def constraint_jac(self, dv):
        return self.con_sign[:, None] * dv[..., self.con_pos, :]


class KoopmanStructure:
    """Constant blocks of the condensed NLP for one model and horizon.

    Holds the fixed sparse pattern of the dynamics rows, the lifted matrix
    ``Gamma`` mapping input moves to latent moves (block ``(k, j)`` is
    ``A^(k-j) B``) and the CSR index arrays of the full Jacobian.
    """

    def __init__(self, model: KoopmanModel, N: int):
        self.N, self.n_u, self.n_z = N, model.n_u, model.n_z
        self.A = model.A_matrix().copy()
        self.B = model.B.copy()
        nu, nz = self.n_u, self.n_z
        self.n_w = N * (nu + nz)
        a_pattern = np.eye(nz, dtype=bool) if model.mode == "diag" else np.ones((nz, nz), dtype=bool)
        rows, cols, vals = [], [], []
        for k in range(N):
            for i in range(nz):
                r = k * nz + i
                rows += [r] * nu
                cols += list(range(k * nu, (k + 1) * nu))
                vals += list(-self.B[i])
                if k > 0:
                    js = np.flatnonzero(a_pattern[i])
                    rows += [r] * js.size
                    cols += list(N * nu + (k - 1) * nz + js)
                    vals += list(-self.A[i, js])
                rows.append(r)
                cols.append(N * nu + k * nz + i)
                vals.append(1.0)
        order = np.lexsort((np.asarray(cols), np.asarray(rows)))
        self.eq_rows = np.asarray(rows)[order]
        self.eq_cols = np.asarray(cols)[order]
        self.eq_data = np.asarray(vals, dtype=float)[order]
        self.eq_data.setflags(write=False)
        G = np.zeros((N, nz, N, nu))
        P = self.B.copy()
        for d in range(N):
            for k in range(d, N):
                G[k, :, k - d, :] = P
            P = self.A @ P
        self.Gamma = G.reshape(N * nz, N * nu)
        self.Gamma3 = G.reshape(N, nz, N * nu)
        self._csr = {}

    def csr_pattern(self, n_con: int):
        """``(indices, indptr)`` of the full Jacobian with ``n_con`` rows per stage."""
        if n_con not in self._csr:
            N, nu, nz = self.N, self.n_u, self.n_z
            counts = np.bincount(self.eq_rows, minlength=N * nz)
            indptr = [0]
            indices = []
            for r in range(N * nz):
                indices.append(self.eq_cols[indptr[-1]:indptr[-1] + counts[r]])
                indptr.append(indptr[-1] + counts[r])
            zc = np.arange(nz)
            for k in range(N):
                for _ in range(n_con):
                    indices.append(N * nu + k * nz + zc)
                    indptr.append(indptr[-1] + nz)
            self._csr[n_con] = (np.concatenate(indices).astype(np.int32) if indices else np.zeros(0, np.int32),
                                np.asarray(indptr, dtype=np.int32))
        return self._csr[n_con]


@dataclass
class CondensedNlp:
    model: KoopmanModel
    config: OcpConfig
    stage: StageTerms
    z0: np.ndarray
    u_lo: np.ndarray  # scaled input box
    u_hi: np.ndarray
    _structure: Optional[KoopmanStructure] = None

    @property
    def structure(self) -> KoopmanStructure:
        """Constant blocks, built on first use (the dense variant never asks)."""
        if self._structure is None or self._structure.N != self.N:
            self._structure = KoopmanStructure(self.model, self.N)
        return self._structure

    @property
    def N(self):
        return self.config.N_c

    @property
    def n_u(self):
        return self.model.n_u

    @property
    def n_z(self):
        return self.model.n_z

    @property
    def n_w(self):
        return self.N * (self.n_u + self.n_z)

    @property
    def n_eq(self):
        return self.N * self.n_z

    @property
    def n_ineq(self):
        return self.N * self.stage.n_con

    def split(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_w,):
            raise ValueError(f"iterate length {w.shape} != ({self.n_w},)")
        k = self.N * self.n_u
        return w[:k].reshape(self.N, self.n_u), w[k:].reshape(self.N, self.n_z)

    def join(self, U, Z):
        return np.concatenate([np.ravel(U), np.ravel(Z)])

    def rollout(self, U):
        U = np.asarray(U, dtype=float).reshape(self.N, self.n_u)
        Z = np.empty((self.N, self.n_z))
        z = self.z0
        for k in range(self.N):
            z = self.model.latent_step(z, U[k])
            Z[k] = z
        return Z

    def eq_residual(self, w):
        U, Z = self.split(w)
        Zprev = np.vstack([self.z0, Z[:-1]])
        return Z - self.model.latent_step(Zprev, U)

    def decoded(self, w):
        return self.model.decode_xy(self.split(w)[1])

    def objective(self, w):
        return float(np.sum(self.stage.residuals(self.decoded(w)) ** 2))

    def constraints(self, w):
        return self.stage.constraints(self.decoded(w)).ravel()

    def residual_map(self, w):
        """Stacked equality, inequality and cost residuals (for dense derivatives)."""
        v = self.decoded(w)
        return np.concatenate([self.eq_residual(w).ravel(), self.stage.constraints(v).ravel(),
                               self.stage.residuals(v).ravel()])

    def initial_guess(self, u=None):
        """Constant input (default mid-box) with the matching latent rollout."""
        u = 0.5 * (self.u_lo + self.u_hi) if u is None else np.clip(np.asarray(u, float), self.u_lo, self.u_hi)
        U = np.tile(u, (self.N, 1))
        return self.join(U, self.rollout(U))


def build_ocp(model: KoopmanModel, config: OcpConfig, x0, y0, setpoints=None,
              structure: Optional[KoopmanStructure] = None) -> CondensedNlp:
    """Encode the measurement and set up the condensed NLP (raw ``x0``, ``y0``)."""
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if x0.shape != (model.n_x,) or y0.shape != (model.n_y,):
        raise ValueError("measurement dimensions do not match the model")
    if config.input_bounds.shape[0] != model.n_u:
        raise ValueError("input_bounds rows != model n_u")
    sc = model.scaling
    if sc is not None:
        xs, ys = sc.x.scale(x0), sc.y.scale(y0)
        lo, hi = sc.u.scale(config.input_bounds[:, 0]), sc.u.scale(config.input_bounds[:, 1])
    else:
        xs, ys = x0, y0
        lo, hi = config.input_bounds[:, 0].copy(), config.input_bounds[:, 1].copy()
    stage = StageTerms(config, sc, model.n_x, model.n_y, setpoints)
    z0 = model.encode(xs, ys)
    return CondensedNlp(model, config, stage, z0, np.asarray(lo, float), np.asarray(hi, float), structure)


def _decoder_derivs(nlp: CondensedNlp, Z):
    """Decoded stages and channel Jacobians ``(N, n_channels, n_z)`` by reverse passes."""
    dec = nlp.model.decoder
    v, cache = dec.forward_cache(Z)
    dv = np.empty((Z.shape[0], nlp.stage.channels.size, Z.shape[1]))
    for i, ch in enumerate(nlp.stage.channels):
        g = np.zeros_like(v)
        g[:, ch] = 1.0
        dv[:, i] = dec.backward(cache, g, param_grads=False)[2]
    return v, dv


def assemble_jacobian(nlp: CondensedNlp, w):
    """Sparse Jacobian of ``[equalities; inequalities]`` and the objective gradient."""
    U, Z = nlp.split(w)
    v, dv = _decoder_derivs(nlp, Z)
    st = nlp.stage
    Cz = st.constraint_jac(dv)
    R = st.residual_jac(dv)
    r = st.residuals(v)
    for k in range(nlp.N):
        if not (np.all(np.isfinite(Cz[k])) and np.all(np.isfinite(R[k])) and np.all(np.isfinite(r[k]))):
            raise AssemblyError(f"non-finite Jacobian entries at stage {k}")
    indices, indptr = nlp.structure.csr_pattern(st.n_con)
    data = np.concatenate([nlp.structure.eq_data, Cz.ravel()])
    J = sp.csr_matrix((data, indices, indptr), shape=(nlp.n_eq + nlp.n_ineq, nlp.n_w))
    grad = np.zeros(nlp.n_w)
    grad[nlp.N * nlp.n_u:] = 2.0 * np.einsum("kcz,kc->kz", R, r).ravel()
    return J, grad


# ---------------------------------------------------------------------------
# SQP problem adapters


class _CondensedProblem:
    """Reduced-space view of the condensed NLP for :func:`koopnmpc.sqp.run_sqp`."""

    def __init__(self, nlp: CondensedNlp):
        self.nlp = nlp
        self.ku = nlp.N * nlp.n_u
        self.lo = np.tile(nlp.u_lo, nlp.N)
        self.hi = np.tile(nlp.u_hi, nlp.N)

    def u_bounds(self, w):
        u = w[:self.ku]
        return self.lo - u, self.hi - u

    def project(self, w):
        w = w.copy()
        w[:self.ku] = np.clip(w[:self.ku], self.lo, self.hi)
        return w

    def evaluate(self, w):
        nlp = self.nlp
        v = nlp.decoded(w)
        f = float(np.sum(nlp.stage.residuals(v) ** 2))
        c = nlp.stage.constraints(v).ravel()
        return f, c, float(np.sum(np.abs(nlp.eq_residual(w))))

    def expand(self, w, du, lin):
        return np.concatenate([du, self._M @ du + self._m])


class _TailoredProblem(_CondensedProblem):
    def linearize(self, w):
        nlp = self.nlp
        st = nlp.stage
        N, nz = nlp.N, nlp.n_z
        U, Z = nlp.split(w)
        v, dv = _decoder_derivs(nlp, Z)
        r = st.residuals(v)
        R = st.residual_jac(dv)
        c = st.constraints(v)
        Cz = st.constraint_jac(dv)
        req = nlp.eq_residual(w)
        A = nlp.structure.A
        m = np.zeros((N, nz))
        prev = np.zeros(nz)
        for k in range(N):
            prev = A @ prev - req[k]
            m[k] = prev
        G3 = nlp.structure.Gamma3
        L = np.einsum("kcz,kzj->kcj", R, G3).reshape(-1, self.ku)
        rl = (r + np.einsum("kcz,kz->kc", R, m)).ravel()
        C = np.einsum("kcz,kzj->kcj", Cz, G3).reshape(-1, self.ku)
        c_lin = (c + np.einsum("kcz,kz->kc", Cz, m)).ravel()
        self._M = nlp.structure.Gamma
        self._m = m.ravel()
        return Linearization(2.0 * L.T @ L, 2.0 * L.T @ rl, C, c_lin, float(np.sum(r ** 2)), c.ravel(),
                             float(np.sum(np.abs(req))), float(np.max(np.abs(req), initial=0.0)))


def dense_fd_jacobian(fun, w, rel_step=1e-6):
    """Dense central finite-difference Jacobian of ``fun`` at ``w``."""
    w = np.asarray(w, dtype=float)
    f0 = fun(w)
    J = np.empty((f0.size, w.size))
    for j in range(w.size):
        h = rel_step * max(1.0, abs(w[j]))
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] -= h
        J[:, j] = (fun(wp) - fun(wm)) / (2.0 * h)
    return f0, J


class _DenseProblem(_CondensedProblem):
    """Same NLP, dense finite-difference derivatives, nothing cached between iterations."""

    def linearize(self, w):
        nlp = self.nlp
        ne, ni = nlp.n_eq, nlp.n_ineq
        F, J = dense_fd_jacobian(nlp.residual_map, w)
        req, c, r = F[:ne], F[ne:ne + ni], F[ne + ni:]
        ku = self.ku
        Eu, Ez = J[:ne, :ku], J[:ne, ku:]
        sol = np.linalg.solve(Ez, np.column_stack([Eu, req]))
        M, m = -sol[:, :ku], -sol[:, ku]
        Cu, Cz = J[ne:ne + ni, :ku], J[ne:ne + ni, ku:]
        Ru, Rz = J[ne + ni:, :ku], J[ne + ni:, ku:]
        L = Ru + Rz @ M
        C = Cu + Cz @ M
        self._M, self._m = M, m
        return Linearization(2.0 * L.T @ L, 2.0 * L.T @ (r + Rz @ m), C, c + Cz @ m, float(r @ r), c,
                             float(np.sum(np.abs(req))), float(np.max(np.abs(req), initial=0.0)))


# ---------------------------------------------------------------------------
# Solve and receding horizon


@dataclass
class SolveResult:
    u_scaled: np.ndarray  # (N, n_u)
    u: np.ndarray         # raw units
    z: np.ndarray         # (N, n_z), z_1 .. z_N
    objective: float
    stationarity: float
    feasibility: float
    soft_violation: float
    iterations: int
    wall_time: float
    status: str
    w: np.ndarray

    def log_record(self, controller: str = "koopman"):
        return {"timestamp": time.time(), "controller": controller, "iterations": self.iterations,
                "stationarity": self.stationarity, "feasibility": self.feasibility,
                "wall_time_ms": 1e3 * self.wall_time, "status": self.status}


def solve(nlp: CondensedNlp, guess=None, config: Optional[OcpConfig] = None,
          variant: str = "tailored") -> SolveResult:
    """SQP on the condensed NLP; ``variant`` is ``tailored`` or ``generic_dense``."""
    config = config or nlp.config
    if guess is None:
        guess = nlp.initial_guess()
    guess = np.asarray(guess, dtype=float)
    if guess.shape != (nlp.n_w,):
        raise ValueError("guess does not match the decision layout")
    if variant == "tailored":
        problem = _TailoredProblem(nlp)
    elif variant == "generic_dense":
        problem = _DenseProblem(nlp)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    out = run_sqp(problem, problem.project(guess), config.sqp_options())
    U, Z = nlp.split(out.w)
    sc = nlp.model.scaling
    u_raw = sc.u.unscale(U) if sc is not None else U.copy()
    res = SolveResult(U.copy(), u_raw, Z.copy(), out.f, out.stationarity, out.feasibility, out.soft_violation,
                      out.iterations, out.wall_time, out.status, out.w)
    logger.debug(json.dumps(res.log_record(f"koopman_{variant}")))
    return res


def warm_start_shift(previous: Optional[SolveResult], nlp: CondensedNlp):
    """Shift the previous inputs by one stage (last one repeated) and re-roll the latent states."""
    if previous is None:
        return nlp.initial_guess()
    U = np.asarray(previous.u_scaled, dtype=float)
    U = np.vstack([U[1:], U[-1:]]) if U.shape[0] > 1 else U.copy()
    U = np.clip(U, nlp.u_lo, nlp.u_hi)
    return nlp.join(U, nlp.rollout(U))


@dataclass
class StepInfo:
    result: Optional[SolveResult]
    failed: bool
    message: str = ""


class KoopmanController:
    """Receding-horizon controller with warm starts and a hold-last-input fail-safe."""

    def __init__(self, model: KoopmanModel, config: OcpConfig, variant: str = "tailored"):
        if variant not in ("tailored", "generic_dense"):
            raise ValueError(f"unknown variant {variant!r}")
        self.model = model
        self.config = config
        self.variant = variant
        self.name = f"koopman_{variant}"
        # the dense variant rebuilds its structure every solve (no caching)
        self._structure = KoopmanStructure(model, config.N_c) if variant == "tailored" else None
        self.reset()

    def reset(self, u_prev=None):
        self.previous: Optional[SolveResult] = None
        self.u_prev = None if u_prev is None else np.asarray(u_prev, dtype=float)

    def _solve(self, nlp):
        if self.previous is not None:
            guess = warm_start_shift(self.previous, nlp)
        elif self.u_prev is not None and self.model.scaling is not None:
            guess = nlp.initial_guess(self.model.scaling.u.scale(self.u_prev))
        else:
            guess = nlp.initial_guess(self.u_prev)
        return solve(nlp, guess, self.config, self.variant)

    def step(self, x, y, setpoints=None):
        lo, hi = self.config.input_bounds[:, 0], self.config.input_bounds[:, 1]
        try:
            nlp = build_ocp(self.model, self.config, x, y, setpoints, self._structure)
            res = self._solve(nlp)
            if not np.all(np.isfinite(res.u)):
                raise FloatingPointError("non-finite solution")
        except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as err:
            held = self.u_prev if self.u_prev is not None else 0.5 * (lo + hi)
            logger.warning("solver failure, holding previous input: %s", err)
            return np.clip(held, lo, hi), StepInfo(None, True, str(err))
        self.previous = res
        self.u_prev = np.clip(res.u[0], lo, hi)
        return self.u_prev.copy(), StepInfo(res, False)


def control_step(controller: KoopmanController, x0, y0, setpoints=None):
    """Solve at the measurement and return the first move (raw, inside the box) plus step info."""
    return controller.step(x0, y0, setpoints)
