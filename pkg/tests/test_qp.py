import numpy as np
import pytest
from scipy import optimize

from robustcbf import qp


def rand_qp(rng, n=5, p=2, m=8):
    M = rng.normal(size=(n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(p, n))
    x0 = rng.normal(size=n)
    C = rng.normal(size=(m, n))
    h = C @ x0 + rng.uniform(0.0, 1.0, m)
    return Q, c, A, A @ x0, C, h


def test_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(0)
    Q, c, *_ = rand_qp(rng)
    res = qp.solve_qp(Q, c)
    assert res.status == qp.OPTIMAL
    assert np.allclose(res.x, np.linalg.solve(Q, -c), atol=1e-9)


def test_equality_only_matches_kkt_system():
    rng = np.random.default_rng(1)
    Q, c, A, b, _, _ = rand_qp(rng)
    n, p = Q.shape[0], A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((p, p))]])
    expect = np.linalg.solve(K, np.concatenate([-c, b]))[:n]
    res = qp.solve_qp(Q, c, A, b)
    assert np.allclose(res.x, expect, atol=1e-9)


def test_projection_onto_half_plane():
    a = np.array([1.0, 2.0])
    z = np.array([3.0, 3.0])
    res = qp.solve_qp(np.eye(2), -z, C=a[None, :], h=np.array([1.0]))
    expect = z - (a @ z - 1.0) / (a @ a) * a
    assert np.allclose(res.x, expect, atol=1e-8)
    assert res.lam[0] == pytest.approx((a @ z - 1.0) / (a @ a), abs=1e-8)


def test_random_programs_against_slsqp():
    rng = np.random.default_rng(2)
    for _ in range(30):
        Q, c, A, b, C, h = rand_qp(rng)
        res = qp.solve_qp(Q, c, A, b, C, h)
        assert res.status == qp.OPTIMAL
        assert res.kkt_residual < 1e-8
        ref = optimize.minimize(
            lambda x: 0.5 * x @ Q @ x + c @ x, np.zeros(c.size), jac=lambda x: Q @ x + c,
            constraints=[{"type": "eq", "fun": lambda x: A @ x - b, "jac": lambda x: A},
                         {"type": "ineq", "fun": lambda x: h - C @ x, "jac": lambda x: -C}],
            method="SLSQP", options={"ftol": 1e-12, "maxiter": 500},
        )
        assert np.allclose(res.x, ref.x, atol=1e-5)


def test_detects_infeasible():
    C = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = np.array([-1.0, -1.0])  # x <= -1 and x >= 1
    res = qp.solve_qp(np.eye(2), np.zeros(2), C=C, h=h)
    assert res.status == qp.INFEASIBLE


def test_linear_objective():
    # an LP over the unit box: min -x - y
    C = np.vstack([np.eye(2), -np.eye(2)])
    res = qp.solve_qp(np.zeros((2, 2)), -np.ones(2), C=C, h=np.ones(4))
    assert res.status == qp.OPTIMAL
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-7)


def test_kkt_residual_zero_at_solution():
    Q = np.eye(1)
    assert qp.kkt_residual(Q, np.array([-1.0]), np.zeros((0, 1)), np.zeros(0),
                           np.zeros((0, 1)), np.zeros(0), np.array([1.0]), np.zeros(0), np.zeros(0)) == 0.0
