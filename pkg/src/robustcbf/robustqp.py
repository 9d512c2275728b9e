"""Robust safety-filter program in dual form.

For every agent block the robust requirement

    h1.d + u^T h2 d + h3.u <= k_c   for all d with G d <= g

is replaced by its LP dual: there is ``xi >= 0`` with

    h3.u + g.xi <= k_c,      G^T xi = h1 + h2^T u.

Together with a polygonal inner approximation of ``|u| <= u_max`` this is a
convex QP in ``(u, xi_1, ..., xi_N)`` minimising ``1/2 |u - u_des|^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .bounds import UncertaintyPolytope
from .cbf import CbcCoefficients
from .qp import INFEASIBLE, MAX_ITER, OPTIMAL, solve_qp

Block = Tuple[CbcCoefficients, UncertaintyPolytope]

__all__ = [
    "OPTIMAL",
    "INFEASIBLE",
    "MAX_ITER",
    "RobustProgram",
    "QpSolution",
    "assemble",
    "solve",
    "primal_worst_case",
    "polygon_halfplanes",
]


def polygon_halfplanes(K: int, u_max: float):
    """Facets ``a_k . u <= u_max cos(pi/K)`` of the inscribed regular K-gon."""
    ang = 2.0 * np.pi * np.arange(K) / K
    a = np.column_stack([np.cos(ang), np.sin(ang)])
    return a, np.full(K, u_max * math.cos(math.pi / K))


@dataclass
class RobustProgram:
    u_des: np.ndarray
    u_max: float
    blocks: List[Block] = field(default_factory=list)
    ball_facets: int = 16

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def xi_sizes(self) -> List[int]:
        return [poly.G.shape[0] for _, poly in self.blocks]

    @property
    def n_vars(self) -> int:
        return 2 + sum(self.xi_sizes())

    def matrices(self):
        """``(Q, c, A, b, C, h)`` of the QP, equality rows scaled to unit norm."""
        n = self.n_vars
        Q = np.zeros((n, n))
        Q[0, 0] = Q[1, 1] = 1.0
        c = np.zeros(n)
        c[:2] = -self.u_des

        A_rows, b_rows, C_rows, h_rows = [], [], [], []
        off = 2
        for coef, poly in self.blocks:
            r, P = poly.G.shape
            # G^T xi - h2^T u = h1
            Aeq = np.zeros((P, n))
            Aeq[:, :2] = -coef.h2.T
            Aeq[:, off : off + r] = poly.G.T
            beq = coef.h1.copy()
            norms = np.linalg.norm(Aeq, axis=1)
            norms[norms == 0] = 1.0
            A_rows.append(Aeq / norms[:, None])
            b_rows.append(beq / norms)
            # h3 u + g xi <= k_c
            row = np.zeros(n)
            row[:2] = coef.h3
            row[off : off + r] = poly.g
            C_rows.append(row[None, :])
            h_rows.append([coef.k_c])
            # xi >= 0
            nonneg = np.zeros((r, n))
            nonneg[:, off : off + r] = -np.eye(r)
            C_rows.append(nonneg)
            h_rows.append(np.zeros(r))
            off += r
        a, bound = polygon_halfplanes(self.ball_facets, self.u_max)
        ball = np.zeros((self.ball_facets, n))
        ball[:, :2] = a
        C_rows.append(ball)
        h_rows.append(bound)

        A = np.vstack(A_rows) if A_rows else np.zeros((0, n))
        b = np.concatenate(b_rows) if b_rows else np.zeros(0)
        C = np.vstack(C_rows)
        h = np.concatenate([np.asarray(v, float) for v in h_rows])
        return Q, c, A, b, C, h


@dataclass
class QpSolution:
    u: np.ndarray
    xi: List[np.ndarray]
    status: str
    kkt_residual: float
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def assemble(u_des, blocks: Sequence[Block], u_max: float, K: int = 16) -> RobustProgram:
    u_des = np.asarray(u_des, dtype=float).reshape(-1)
    if u_des.shape != (2,):
        raise ValueError(f"u_des must be a 2-vector, got shape {u_des.shape}")
    if K < 8:
        raise ValueError("the control polygon needs at least 8 facets")
    for coef, poly in blocks:
        P = poly.G.shape[1]
        if coef.h1.shape != (P,) or coef.h2.shape != (2, P) or coef.h3.shape != (2,):
            raise ValueError("coefficient shapes do not match the polytope dimension")
        if poly.g.shape != (poly.G.shape[0],):
            raise ValueError("polytope G and g disagree")
    return RobustProgram(u_des, float(u_max), list(blocks), int(K))


def _cheapest_dual(u, coef: CbcCoefficients, poly: UncertaintyPolytope):
    """Minimal ``g.xi`` with ``G^T xi = h1 + h2^T u`` for a paired orthonormal ``G``."""
    V = poly.G[0::2]
    if not np.allclose(poly.G[1::2], -V) or not np.allclose(V @ V.T, np.eye(V.shape[0]), atol=1e-10):
        return None
    t = V @ (coef.h1 + coef.h2.T @ u)
    xi = np.empty(poly.G.shape[0])
    xi[0::2] = np.maximum(t, 0.0)
    xi[1::2] = np.maximum(-t, 0.0)
    return xi


def _pass_through(prog: RobustProgram):
    """``(u_des, cheapest xi)`` when that point is feasible, else ``None``."""
    u = prog.u_des
    a, bound = polygon_halfplanes(prog.ball_facets, prog.u_max)
    if np.any(a @ u > bound):
        return None
    xis = []
    for coef, poly in prog.blocks:
        xi = _cheapest_dual(u, coef, poly)
        if xi is None or coef.h3 @ u + poly.g @ xi > coef.k_c:
            return None
        xis.append(xi)
    return xis


def solve(prog: RobustProgram, tol: float = 1e-10, max_iter: int = 80) -> QpSolution:
    """Minimally invasive robustly safe control.

    If ``u_des`` is already feasible it is optimal (the objective is zero
    there) and is returned as is; otherwise the full program goes to the
    interior-point solver.
    """
    xis = _pass_through(prog)
    if xis is not None:
        return QpSolution(prog.u_des.copy(), xis, OPTIMAL, 0.0, 0)

    Q, c, A, b, C, h = prog.matrices()
    res = solve_qp(Q, c, A, b, C, h, tol=tol, max_iter=max_iter)
    sizes = prog.xi_sizes()
    xi, off = [], 2
    for r in sizes:
        xi.append(res.x[off : off + r].copy())
        off += r
    status = res.status
    if status == OPTIMAL:
        viol = max(float(np.max(C @ res.x - h, initial=-np.inf)), 0.0)
        if res.kkt_residual >= 1e-6 or viol > 1e-7:
            status = MAX_ITER
    return QpSolution(res.x[:2].copy(), xi, status, res.kkt_residual, res.iterations)


def primal_worst_case(u, block: Block) -> float:
    """``max_d h1.d + u^T h2 d + h3.u`` over the polytope, by enumerating its corners."""
    coef, poly = block
    u = np.asarray(u, float)
    w = coef.h1 + coef.h2.T @ u
    return float(np.max(poly.vertices() @ w) + coef.h3 @ u)


def dumps(prog: RobustProgram, sol: QpSolution | None = None) -> str:
    """Full-precision text dump of a program (and its solution) for triage."""
    doc = {
        "format_version": 1,
        "kind": "robust_program",
        "objective": "0.5*|u - u_des|^2",
        "u_des": prog.u_des.tolist(),
        "u_max": prog.u_max,
        "ball_facets": prog.ball_facets,
        "blocks": [
            {
                "k_c": coef.k_c,
                "h1": coef.h1.tolist(),
                "h2": coef.h2.tolist(),
                "h3": coef.h3.tolist(),
                "G": poly.G.tolist(),
                "g": poly.g.tolist(),
            }
            for coef, poly in prog.blocks
        ],
    }
    if sol is not None:
        doc["solution"] = {
            "u": sol.u.tolist(),
            "xi": [x.tolist() for x in sol.xi],
            "status": sol.status,
            "kkt_residual": sol.kkt_residual,
        }
    return json.dumps(doc, indent=1)


def loads(text: str) -> RobustProgram:
    doc = json.loads(text)
    blocks = [
        (
            CbcCoefficients(b["k_c"], np.array(b["h1"]), np.array(b["h2"]), np.array(b["h3"])),
            UncertaintyPolytope(np.array(b["G"]), np.array(b["g"])),
        )
        for b in doc["blocks"]
    ]
    return assemble(doc["u_des"], blocks, doc["u_max"], doc["ball_facets"])
