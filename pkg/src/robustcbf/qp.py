"""Dense primal-dual interior-point solver for small convex QPs.

Solves

    minimize    1/2 x^T Q x + c^T x
    subject to  A x  = b
                C x <= h

with Q positive semidefinite, using Mehrotra's predictor-corrector method.
When the iteration does not converge, an auxiliary phase-one program decides
between "infeasible" and "max_iter".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    lam: np.ndarray  # inequality multipliers
    status: str
    iterations: int
    kkt_residual: float


def kkt_residual(Q, c, A, b, C, h, x, y, lam) -> float:
    """Largest violation among stationarity, feasibility and complementarity."""
    r = [np.abs(Q @ x + c + A.T @ y + C.T @ lam).max(initial=0.0)]
    r.append(np.abs(A @ x - b).max(initial=0.0))
    slack = h - C @ x
    r.append(np.maximum(-slack, 0.0).max(initial=0.0))
    r.append(np.maximum(-lam, 0.0).max(initial=0.0))
    r.append(np.abs(lam * slack).max(initial=0.0))
    return float(max(r))


def _empty(rows, n):
    return np.zeros((rows, n))


def solve_qp(*args, **kwargs) -> QpResult:
    """Solve the QP; see :func:`_solve` for the arguments.

    Infeasible programs drive some iterates towards overflow on the way to
    being classified, so floating point warnings are silenced here.
    """
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        return _solve(*args, **kwargs)


def _solve(
    Q: np.ndarray,
    c: np.ndarray,
    A: Optional[np.ndarray] = None,
    b: Optional[np.ndarray] = None,
    C: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 80,
    check_infeasible: bool = True,
) -> QpResult:
    n = c.size
    A = _empty(0, n) if A is None else np.atleast_2d(A)
    b = np.zeros(0) if b is None else np.asarray(b, float)
    C = _empty(0, n) if C is None else np.atleast_2d(C)
    h = np.zeros(0) if h is None else np.asarray(h, float)
    p, m = A.shape[0], C.shape[0]
    reg = 1e-13

    # starting point: least-squares fit of the linearised system with unit weights
    K0 = np.zeros((n + p, n + p))
    K0[:n, :n] = Q + C.T @ C + reg * np.eye(n)
    K0[:n, n:] = A.T
    K0[n:, :n] = A
    K0[n:, n:] = -reg * np.eye(p)
    rhs0 = np.concatenate([-c + C.T @ h, b])
    sol0 = linalg.lstsq(K0, rhs0, check_finite=False)[0]
    x, y = sol0[:n], sol0[n:]
    s = h - C @ x
    if m:
        s = s + max(0.0, 1.0 - s.min())
    lam = np.ones(m)

    scale_p = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(h).max(initial=0.0))

    best, best_it = None, 0
    stall_tol = 1e3 * tol
    status = MAX_ITER
    it = 0
    probe_at = min(30, max_iter)
    for it in range(1, max_iter + 1):
        if it == probe_at + 1 and check_infeasible and m and _infeasible(A, b, C, h):
            status = INFEASIBLE
            break
        r_d = Q @ x + c + A.T @ y + C.T @ lam
        r_p = A @ x - b
        r_i = C @ x + s - h
        mu = float(s @ lam) / m if m else 0.0
        # dual residual relative to the size of the terms that cancel in it
        scale_d = 1.0 + (np.abs(c) + np.abs(Q) @ np.abs(x) + np.abs(A.T) @ np.abs(y)
                         + np.abs(C.T) @ np.abs(lam)).max(initial=0.0)
        res = max(np.abs(r_d).max(initial=0.0) / scale_d,
                  np.abs(r_p).max(initial=0.0) / scale_p,
                  np.abs(r_i).max(initial=0.0) / scale_p)
        if best is None or res + mu < best[0]:
            best = (res + mu, x.copy(), y.copy(), lam.copy())
            best_it = it
        if res < tol and mu < tol:
            status = OPTIMAL
            break
        # ill-conditioned programs stall a little above tol once mu is
        # negligible; further steps only amplify round-off
        if mu < tol and best[0] < stall_tol and it - best_it >= 3:
            x, y, lam = best[1], best[2], best[3]
            status = OPTIMAL
            break

        if s.min(initial=1.0) <= 0.0:
            break
        w = lam / s
        Kmat = np.zeros((n + p, n + p))
        Kmat[:n, :n] = Q + (C.T * w) @ C + reg * np.eye(n)
        Kmat[:n, n:] = A.T
        Kmat[n:, :n] = A
        Kmat[n:, n:] = -reg * np.eye(p)
        try:
            lu = linalg.lu_factor(Kmat, check_finite=False)
        except (linalg.LinAlgError, ValueError):
            break

        def direction(r_c):
            t = (-r_c + lam * r_i) / s
            rhs = np.concatenate([-r_d - C.T @ t, -r_p])
            sol = linalg.lu_solve(lu, rhs, check_finite=False)
            dx, dy = sol[:n], sol[n:]
            ds = -r_i - C @ dx
            dl = (-r_c - lam * ds) / s
            return dx, dy, ds, dl

        dx, dy, ds, dl = direction(lam * s)
        a_aff = min(_max_step(s, ds), _max_step(lam, dl))
        if m:
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dl)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, ds, dl = direction(lam * s + ds * dl - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dl)))
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        lam = lam + alpha * dl
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            break

    if status != OPTIMAL:
        _, x, y, lam = best
        if status == MAX_ITER and it <= probe_at and check_infeasible and m and _infeasible(A, b, C, h):
            status = INFEASIBLE
    return QpResult(x, y, lam, status, it, kkt_residual(Q, c, A, b, C, h, x, y, lam))


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _infeasible(A, b, C, h, tol: float = 1e-7) -> bool:
    """Phase one: minimise the uniform relaxation ``t`` of ``C x <= h``."""
    n = A.shape[1]
    m = C.shape[0]
    eps = 1e-8
    Q1 = eps * np.eye(n + 1)
    c1 = np.zeros(n + 1)
    c1[-1] = 1.0
    A1 = np.hstack([A, np.zeros((A.shape[0], 1))])
    row_norm = np.linalg.norm(C, axis=1)
    C1 = np.vstack([
        np.hstack([C, -np.maximum(row_norm, 1e-12)[:, None]]),
        np.concatenate([np.zeros(n), [-1.0]])[None, :],
    ])
    h1 = np.concatenate([h, [1.0]])
    res = _solve(Q1, c1, A1, b, C1, h1, tol=1e-10, max_iter=100, check_infeasible=False)
    if res.status != OPTIMAL:
        return True
    return bool(res.x[-1] > tol)
