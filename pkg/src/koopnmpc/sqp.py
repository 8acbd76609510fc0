"""Gauss-Newton SQP over input moves with softened path constraints.

Problems expose a reduced linearization in the input step ``du``: every
other decision variable (latent states for the condensed Koopman NLP,
nothing for single shooting) is an affine function ``M du + m`` of it.
The subproblem is the box/soft QP of :mod:`koopnmpc.qp`; globalization is
a backtracking line search on the l1 merit function

    phi(w) = f(w) + rho * sum(max(0, c(w))) + rho * ||r_eq(w)||_1 .
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .qp import solve_box_soft_qp

STATUSES = ("optimal", "max_iter", "infeasible_restoration")


@dataclass
class SqpOptions:
    opt_tol: float = 1e-5
    feas_tol: float = 1e-3
    max_iter: int = 200
    soft_penalty: float = 1e4
    levenberg: float = 1e-8
    armijo: float = 1e-4
    min_step: float = 1e-8


@dataclass
class Linearization:
    """Reduced quadratic model at the current iterate.

    ``H`` and ``g`` are the Gauss-Newton Hessian and gradient in ``du``;
    ``C du + c_lin`` linearizes the soft constraints (``c_lin`` already
    contains the offset of any equality-restoring step). ``c`` and
    ``eq_norm`` describe the current point itself.
    """

    H: np.ndarray
    g: np.ndarray
    C: np.ndarray
    c_lin: np.ndarray
    f: float
    c: np.ndarray
    eq_l1: float
    eq_norm: float


@dataclass
class SqpOutcome:
    w: np.ndarray
    f: float
    stationarity: float
    feasibility: float
    soft_violation: float
    iterations: int
    status: str
    wall_time: float
    lin: Optional[Linearization] = None


def merit(f, c, eq_l1, rho):
    return f + rho * float(np.sum(np.maximum(c, 0.0))) + rho * eq_l1


def run_sqp(problem, w0, opts: SqpOptions) -> SqpOutcome:
    """Iterate until ``||H du||_inf <= opt_tol`` with equalities within ``feas_tol``.

    ``problem`` provides ``u_bounds(w) -> (lo, hi)`` for ``du``,
    ``linearize(w) -> Linearization``, ``expand(w, du, lin) -> dw`` and
    ``evaluate(w) -> (f, c, eq_l1)`` (may raise ``FloatingPointError`` or
    ``RuntimeError`` on trial points, which are then rejected).
    """
    t0 = time.perf_counter()
    rho = opts.soft_penalty
    w = np.array(w0, dtype=float)
    best = None
    it = 0
    status = "max_iter"
    stat = np.inf
    while True:
        lin = problem.linearize(w)
        viol = float(np.max(np.maximum(lin.c, 0.0), initial=0.0))
        phi = merit(lin.f, lin.c, lin.eq_l1, rho)
        if lin.eq_norm <= opts.feas_tol and (best is None or phi < best[1]):
            best = (w.copy(), phi, lin)
        lo, hi = problem.u_bounds(w)
        Hr = lin.H + opts.levenberg * np.eye(lin.H.shape[0])
        qp = solve_box_soft_qp(Hr, lin.g, lo, hi, lin.C, lin.c_lin, rho=rho, eps=0.0)
        du = qp.x
        stat = float(np.max(np.abs(Hr @ du), initial=0.0))
        if stat <= opts.opt_tol and lin.eq_norm <= opts.feas_tol:
            status = "optimal" if viol <= opts.feas_tol else "infeasible_restoration"
            break
        if it >= opts.max_iter:
            break
        dw = problem.expand(w, du, lin)
        soft_new = float(np.sum(np.maximum(lin.c_lin + lin.C @ du, 0.0))) if lin.c.size else 0.0
        soft_old = float(np.sum(np.maximum(lin.c, 0.0)))
        slope = float(lin.g @ du) + rho * (soft_new - soft_old) - rho * lin.eq_l1
        alpha = 1.0
        accepted = False
        while alpha >= opts.min_step:
            trial = w + alpha * dw
            try:
                f_t, c_t, e_t = problem.evaluate(trial)
                phi_t = merit(f_t, c_t, e_t, rho)
            except (FloatingPointError, RuntimeError):
                phi_t = np.inf
            if np.isfinite(phi_t) and phi_t <= phi + opts.armijo * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        it += 1
        if not accepted:
            break
        w = problem.project(trial)
    if status == "max_iter" and best is not None:
        w, _, lin = best
        viol = float(np.max(np.maximum(lin.c, 0.0), initial=0.0))
    feas = max(lin.eq_norm, viol)
    return SqpOutcome(w, float(lin.f), stat, feas, viol, it, status, time.perf_counter() - t0, lin)
