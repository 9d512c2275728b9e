import math

import numpy as np
import pytest
from scipy import optimize

from generators import U_MAX, feasibility_margin, primal_residual, rand_program
from robustcbf import bounds, cbf, qp, robustqp


def line_block(a, b, P=8):
    """Block whose robust constraint is just ``a . u <= b``."""
    coef = cbf.CbcCoefficients(float(b), np.zeros(P), np.zeros((2, P)), np.asarray(a, float))
    return coef, bounds.point_polytope(np.zeros(P))


def primal_reference(prog):
    """Minimiser of the enumerated primal program by SLSQP."""
    rows, rhs = [], []
    for coef, poly in prog.blocks:
        V = poly.vertices()
        rows.append(V @ coef.h2.T + coef.h3)
        rhs.append(coef.k_c - V @ coef.h1)
    a, bound = robustqp.polygon_halfplanes(prog.ball_facets, prog.u_max)
    C = np.vstack(rows + [a])
    h = np.concatenate(rhs + [bound])
    res = optimize.minimize(
        lambda u: 0.5 * np.sum((u - prog.u_des) ** 2), np.zeros(2), jac=lambda u: u - prog.u_des,
        constraints=[{"type": "ineq", "fun": lambda u: h - C @ u, "jac": lambda u: -C}],
        method="SLSQP", options={"ftol": 1e-14, "maxiter": 500},
    )
    return res.x


def test_no_agents_passes_through():
    u_des = np.array([3.0, -4.0])
    sol = robustqp.solve(robustqp.assemble(u_des, [], U_MAX))
    assert sol.optimal and np.array_equal(sol.u, u_des)


def test_slack_constraint_passes_through():
    rng = np.random.default_rng(0)
    prog = rand_program(rng, max_blocks=1)
    coef, poly = prog.blocks[0]
    slack = cbf.CbcCoefficients(1e9, coef.h1, coef.h2, coef.h3)
    prog = robustqp.assemble([1.0, 2.0], [(slack, poly)], U_MAX)
    sol = robustqp.solve(prog)
    assert sol.optimal and np.array_equal(sol.u, [1.0, 2.0])
    xi = sol.xi[0]
    assert np.all(xi >= 0)
    assert np.allclose(poly.G.T @ xi, coef.h1 + coef.h2.T @ sol.u)


def test_matrix_shapes():
    rng = np.random.default_rng(1)
    prog = rand_program(rng, max_blocks=3)
    Q, c, A, b, C, h = prog.matrices()
    N = prog.n_blocks
    assert A.shape == (N * 8, 2 + N * 16)
    assert C.shape == (N * (1 + 16) + 16, prog.n_vars)
    assert Q.shape == (prog.n_vars, prog.n_vars) and b.shape == (N * 8,) and h.shape == (C.shape[0],)


def test_assemble_validates():
    coef, poly = line_block([1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        robustqp.assemble([1.0, 2.0, 3.0], [], U_MAX)
    with pytest.raises(ValueError):
        robustqp.assemble([0.0, 0.0], [(coef, bounds.point_polytope(np.zeros(4)))], U_MAX)
    with pytest.raises(ValueError):
        robustqp.assemble([0.0, 0.0], [], U_MAX, K=4)


def test_single_half_plane_projection():
    a, b = np.array([1.0, 1.0]), 1.0
    u_des = np.array([2.0, 3.0])
    sol = robustqp.solve(robustqp.assemble(u_des, [line_block(a, b)], U_MAX))
    expect = u_des - (a @ u_des - b) / (a @ a) * a
    assert sol.optimal
    assert np.allclose(sol.u, expect, atol=1e-8)


def test_control_limit_projection():
    u_des = np.array([30.0, 0.0])
    sol = robustqp.solve(robustqp.assemble(u_des, [], U_MAX))
    assert np.allclose(sol.u, [U_MAX * math.cos(math.pi / 16), 0.0], atol=1e-8)
    assert np.linalg.norm(sol.u) <= U_MAX


def test_detects_infeasible():
    sol = robustqp.solve(robustqp.assemble([0.0, 0.0], [line_block([1.0, 0.0], -2 * U_MAX)], U_MAX))
    assert sol.status == robustqp.INFEASIBLE


def test_random_programs_primal_feasible_and_optimal():
    rng = np.random.default_rng(2)
    solved = 0
    for _ in range(60):
        prog = rand_program(rng)
        sol = robustqp.solve(prog)
        margin = feasibility_margin(prog)
        if margin > 1e-4:
            assert sol.optimal
        if not sol.optimal:
            continue
        solved += 1
        assert primal_residual(prog, sol.u) <= 1e-7
        assert np.allclose(sol.u, primal_reference(prog), atol=1e-5)
    assert solved > 30


def test_dual_certificate_is_consistent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        prog = rand_program(rng)
        sol = robustqp.solve(prog)
        if not sol.optimal:
            continue
        for (coef, poly), xi in zip(prog.blocks, sol.xi):
            assert np.all(xi >= -1e-9)
            assert np.allclose(poly.G.T @ xi, coef.h1 + coef.h2.T @ sol.u, atol=1e-7)
            assert coef.h3 @ sol.u + poly.g @ xi <= coef.k_c + 1e-7


def test_pass_through_is_exact():
    rng = np.random.default_rng(4)
    for _ in range(20):
        prog = rand_program(rng, u_scale=0.5)
        prog = robustqp.assemble(prog.u_des, [(cbf.CbcCoefficients(c.k_c + 50.0, c.h1, c.h2, c.h3), p)
                                              for c, p in prog.blocks], U_MAX)
        sol = robustqp.solve(prog)
        assert np.array_equal(sol.u, prog.u_des)


def test_worst_case_closed_forms():
    rng = np.random.default_rng(5)
    box = bounds.to_polytope(bounds.ConfidenceEllipsoid(np.zeros(8), np.eye(8), 1.0, 0.5))
    h3 = rng.normal(size=2)
    u = rng.normal(size=2)
    h2 = rng.normal(size=(2, 8))
    coef = cbf.CbcCoefficients(0.0, -h2.T @ u, h2, h3)
    assert robustqp.primal_worst_case(u, (coef, box)) == pytest.approx(h3 @ u)
    c = rng.normal(size=8)
    coef = cbf.CbcCoefficients(0.0, c, np.zeros((2, 8)), h3)
    assert robustqp.primal_worst_case(u, (coef, box)) == pytest.approx(h3 @ u + np.abs(c).sum())


def test_worst_case_against_qp_engine_lp():
    rng = np.random.default_rng(6)
    for _ in range(20):
        prog = rand_program(rng, max_blocks=1)
        coef, poly = prog.blocks[0]
        u = rng.normal(size=2)
        w = coef.h1 + coef.h2.T @ u
        res = qp.solve_qp(np.zeros((8, 8)), -w, C=poly.G, h=poly.g)
        assert res.status == qp.OPTIMAL
        lp = w @ res.x + coef.h3 @ u
        assert robustqp.primal_worst_case(u, (coef, poly)) == pytest.approx(lp, abs=1e-8)


def test_solve_is_deterministic_and_dump_roundtrips():
    rng = np.random.default_rng(7)
    prog = rand_program(rng)
    a, b = robustqp.solve(prog), robustqp.solve(prog)
    assert np.array_equal(a.u, b.u) and a.status == b.status
    back = robustqp.loads(robustqp.dumps(prog, a))
    c = robustqp.solve(back)
    assert np.array_equal(c.u, a.u)
