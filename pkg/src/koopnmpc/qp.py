"""Dense convex QP with box bounds and softened linear inequalities.

    min  1/2 x'Hx + g'x + rho * sum(s) + eps/2 * s's
    s.t. lo <= x <= hi,   c + C x <= s,   s >= 0

Solved by a Mehrotra predictor-corrector interior-point method. The slack
block is diagonal and is eliminated, so every iteration factors one
``n x n`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


class QpError(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    s: np.ndarray
    lam_upper: np.ndarray
    lam_lower: np.ndarray
    lam_soft: np.ndarray
    iterations: int
    converged: bool


def solve_box_soft_qp(H, g, lo, hi, C=None, c=None, rho: float = 1e4, eps: float = 1e-2,
                      tol: float = 1e-11, max_iter: int = 80, snap: float = 1e-9) -> QpResult:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = g.size
    if C is None or np.size(C) == 0:
        C = np.zeros((0, n))
        c = np.zeros(0)
    C = np.asarray(C, dtype=float)
    c = np.asarray(c, dtype=float)
    m = c.size
    if np.any(lo > hi):
        raise QpError("inconsistent box")

    # inequality blocks: x <= hi | -x <= -lo | C x - s <= -c | -s <= 0
    def G(x, s):
        return np.concatenate([x, -x, C @ x - s, -s])

    def GT(w):
        w1, w2, w3, w4 = w[:n], w[n:2 * n], w[2 * n:2 * n + m], w[2 * n + m:]
        return np.concatenate([w1 - w2 + C.T @ w3, -w3 - w4])

    h = np.concatenate([hi, -lo, -c, np.zeros(m)])
    q = np.concatenate([g, np.full(m, rho)])

    def Qv(x, s):
        return np.concatenate([H @ x, eps * s])

    def factor(d):
        d1, d2, d3, d4 = d[:n], d[n:2 * n], d[2 * n:2 * n + m], d[2 * n + m:]
        S = eps + d3 + d4
        K = H + np.diag(d1 + d2)
        if m:
            K = K + C.T @ ((d3 - d3 * d3 / S)[:, None] * C)
        try:
            return cho_factor(K), S, d3
        except LinAlgError:
            pass
        # rounding on badly scaled matrices: one retry with a relative diagonal shift
        shift = 1e-12 * max(float(np.max(np.abs(np.diag(K)))), 1.0)
        try:
            return cho_factor(K + shift * np.eye(n)), S, d3
        except LinAlgError as err:
            raise QpError(f"KKT factorization failed: {err}") from err

    def solve(fac, ra, rb):
        cf, S, d3 = fac
        a = cho_solve(cf, ra + (C.T @ (d3 * rb / S) if m else 0.0))
        b = (rb + d3 * (C @ a)) / S if m else np.zeros(0)
        return a, b

    # starting point: centred in the box, slacks above current violation
    x = np.clip(np.zeros(n), lo, hi)
    mid = 0.5 * (lo + hi)
    x = np.where(hi - lo > 0, 0.5 * x + 0.5 * mid, x)
    s = np.maximum(c + C @ x, 0.0) + 1.0
    t = np.maximum(h - G(x, s), 1.0)
    lam = np.ones_like(t)
    lam[2 * n:] = max(0.5 * rho, 1.0)  # slack rows: at a solution the two sum to rho
    nt = t.size
    scale_d = 1.0 + np.max(np.abs(q), initial=0.0)
    scale_p = 1.0 + np.max(np.abs(h), initial=0.0)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rd = Qv(x, s) + q + GT(lam)
        rp = G(x, s) + t - h
        mu = float(t @ lam) / nt
        if (np.max(np.abs(rd)) <= tol * scale_d and np.max(np.abs(rp)) <= tol * scale_p
                and mu <= tol * scale_d):
            converged = True
            break
        d = lam / t
        fac = factor(d)

        def direction(rc):
            w = d * rp - rc / t
            r = -rd - GT(w)
            dx, ds = solve(fac, r[:n], r[n:])
            dt = -rp - G(dx, ds)
            dl = -(rc + lam * dt) / t
            return dx, ds, dt, dl

        # predictor
        rc = t * lam
        dx, ds, dt, dl = direction(rc)
        a_aff = min(_max_step(t, dt), _max_step(lam, dl))
        mu_aff = float((t + a_aff * dt) @ (lam + a_aff * dl)) / nt
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rc = t * lam + dt * dl - sigma * mu
        dx, ds, dt, dl = direction(rc)
        alpha = min(1.0, 0.99 * min(_max_step(t, dt), _max_step(lam, dl)))
        x = x + alpha * dx
        s = s + alpha * ds
        t = t + alpha * dt
        lam = lam + alpha * dl

    if not np.all(np.isfinite(x)):
        raise QpError("non-finite QP solution")
    s = np.maximum(s, 0.0)
    polished = _polish(H, g, lo, hi, C, c, rho, eps, x, t, lam)
    if polished is not None:
        x, lam_active = polished
        s = np.maximum(c + C @ x, 0.0)
        if lam_active is not None:
            lam = lam_active
    else:
        # fall back to snapping near-active bounds
        width = np.maximum(hi - lo, 1e-300)
        x = np.where(hi - x <= snap * np.maximum(1.0, width), hi, x)
        x = np.where(x - lo <= snap * np.maximum(1.0, width), lo, x)
    x = np.clip(x, lo, hi)
    return QpResult(x, s, lam[:n], lam[n:2 * n], lam[2 * n:2 * n + m], it, converged)


def _qp_value(H, g, C, c, rho, eps, x):
    s = np.maximum(c + C @ x, 0.0)
    return 0.5 * x @ H @ x + g @ x + rho * s.sum() + 0.5 * eps * s @ s


def _polish(H, g, lo, hi, C, c, rho, eps, x, t, lam):
    """Re-solve on the active set guessed from the interior point; ``None`` if it does not hold up."""
    n, m = g.size, c.size
    up = lam[:n] > t[:n]
    dn = (lam[n:2 * n] > t[n:2 * n]) & ~up
    binding = lam[2 * n:2 * n + m] > t[2 * n:2 * n + m]
    zero_slack = lam[2 * n + m:] > t[2 * n + m:]
    eq = binding & zero_slack
    pen = binding & ~zero_slack
    if eps > 0 and pen.any():
        return None  # slack quadratic couples rows; keep the interior-point answer
    fixed = up | dn
    free = ~fixed
    xf = np.where(up, hi, lo)
    gg = g + rho * C[pen].sum(axis=0)
    Ce = C[eq]
    nf, ne = int(free.sum()), int(eq.sum())
    K = np.zeros((nf + ne, nf + ne))
    K[:nf, :nf] = H[np.ix_(free, free)]
    K[:nf, nf:] = Ce[:, free].T
    K[nf:, :nf] = Ce[:, free]
    rhs = np.concatenate([-(gg[free] + H[np.ix_(free, fixed)] @ xf[fixed]),
                          -(c[eq] + Ce[:, fixed] @ xf[fixed])])
    try:
        sol = np.linalg.solve(K, rhs) if nf + ne else np.zeros(0)
    except np.linalg.LinAlgError:
        return None
    xp = xf.copy()
    xp[free] = sol[:nf]
    if not np.all(np.isfinite(xp)):
        return None
    tol = 1e-9 * (1.0 + np.abs(xp).max(initial=0.0))
    if np.any(xp < lo - tol) or np.any(xp > hi + tol):
        return None
    xp = np.clip(xp, lo, hi)
    lam_new = _active_multipliers(H, g, C, rho, xp, up, dn, eq, pen, sol[nf:], lam.size)
    if _qp_value(H, g, C, c, rho, eps, xp) > _qp_value(H, g, C, c, rho, eps, np.clip(x, lo, hi)) + 1e-12 * (
            1.0 + abs(_qp_value(H, g, C, c, rho, eps, np.clip(x, lo, hi)))):
        return None
    return xp, lam_new


def _active_multipliers(H, g, C, rho, x, up, dn, eq, pen, lam_eq, size):
    """Multipliers of the polished point in the interior-point layout; ``None`` if sign-inconsistent."""
    n, m = g.size, C.shape[0]
    soft = np.zeros(m)
    soft[eq] = lam_eq
    soft[pen] = rho
    tol = 1e-8 * (1.0 + rho)
    if np.any(soft < -tol) or np.any(soft > rho + tol):
        return None
    soft = np.clip(soft, 0.0, rho)
    r = H @ x + g + C.T @ soft
    lam = np.zeros(size)
    lam[:n] = np.where(up, np.maximum(-r, 0.0), 0.0)
    lam[n:2 * n] = np.where(dn, np.maximum(r, 0.0), 0.0)
    lam[2 * n:2 * n + m] = soft
    lam[2 * n + m:] = rho - soft
    return lam


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
