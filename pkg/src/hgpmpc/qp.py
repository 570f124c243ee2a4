"""Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.

    minimize    0.5 x'Hx + g'x
    subject to  C x <= d

The dual method starts from the unconstrained minimiser and adds violated
constraints one at a time, so no feasible starting point is needed and
infeasibility is detected when a violated constraint cannot be added.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class QpInfeasible(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of C, >= 0
    active: list
    iterations: int


def solve_qp(H, g, C=None, d=None, *, tol: float = 1e-9, max_iter: int | None = None) -> QpResult:
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    if C is None or len(C) == 0:
        C = np.zeros((0, n))
        d = np.zeros(0)
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    m = len(d)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(H + 1e-10 * max(1.0, np.abs(H).max()) * np.eye(n))

    # work in y = L' x where the objective is 0.5|y|^2 + (L^-1 g)'y and the
    # constraints read  Nt' y >= b  with n_i = -c_i, b_i = -d_i
    Nt = solve_triangular(L, -C.T, lower=True, check_finite=False) if m else np.zeros((n, 0))
    b = -d
    y = -solve_triangular(L, g, lower=True, check_finite=False)
    norms = np.sqrt((Nt * Nt).sum(0)) if m else np.zeros(0)
    scale = 1.0 + np.abs(b)
    active: list[int] = []
    u = np.zeros(0)
    max_iter = max_iter if max_iter is not None else 10 * (m + n) + 50
    it = 0

    def factor(cols):
        if not cols:
            return None, None
        Q, R = np.linalg.qr(Nt[:, cols])
        return Q, R

    Q1 = R1 = None
    while True:
        if m == 0:
            break
        s = Nt.T @ y - b
        viol = s / scale
        if active:
            viol[active] = np.inf
        p = int(np.argmin(viol))
        if viol[p] >= -tol:
            break
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise RuntimeError("QP active-set iteration limit reached")
            dt = Nt[:, p]
            if active:
                qd = Q1.T @ dt
                r = solve_triangular(R1, qd, check_finite=False)
                z = dt - Q1 @ qd
            else:
                r = np.zeros(0)
                z = dt
            t1, k_drop = np.inf, -1
            pos = r > 1e-12 * max(1.0, norms[p])
            if pos.any():
                ratios = np.where(pos, u / np.where(pos, r, 1.0), np.inf)
                k_drop = int(np.argmin(ratios))
                t1 = ratios[k_drop]
            zn = float(z @ dt)
            sp = float(dt @ y - b[p])
            if zn <= 1e-14 * max(1.0, norms[p] ** 2):
                t2 = np.inf
            else:
                t2 = -sp / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasible(f"constraint {p} cannot be satisfied")
            if not np.isfinite(t2):
                u = u - t * r
                u_p += t
                active.pop(k_drop)
                u = np.delete(u, k_drop)
                Q1, R1 = factor(active)
                continue
            y = y + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_p)
                Q1, R1 = factor(active)
                break
            active.pop(k_drop)
            u = np.delete(u, k_drop)
            Q1, R1 = factor(active)

    x = solve_triangular(L, y, lower=True, trans="T", check_finite=False)
    lam = np.zeros(m)
    if active:
        lam[active] = np.maximum(u, 0.0)
    return QpResult(x, lam, list(active), it)
