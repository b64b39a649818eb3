import numpy as np
import pytest

from trailerplan.ocp.qp import solve_qp, solve_qp_elastic


def random_psd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    ev = np.exp(rng.uniform(0, np.log(cond), size=n))
    return Q @ np.diag(ev) @ Q.T


def cvxopt_reference(G, a, A, b, meq):
    """Independent oracle (interior point)."""
    from cvxopt import matrix, solvers

    solvers.options["show_progress"] = False
    solvers.options["abstol"] = 1e-10
    solvers.options["reltol"] = 1e-10
    solvers.options["feastol"] = 1e-10
    n = len(a)
    P = matrix(G)
    q = matrix(-a)
    ineq = A[meq:]
    hineq = b[meq:]
    Gm = matrix(-ineq) if len(ineq) else matrix(np.zeros((1, n)))
    hm = matrix(-hineq) if len(ineq) else matrix(np.zeros(1))
    if meq:
        sol = solvers.qp(P, q, Gm, hm, matrix(A[:meq]), matrix(b[:meq]))
    else:
        sol = solvers.qp(P, q, Gm, hm)
    return np.array(sol["x"]).ravel(), sol["status"]


def test_unconstrained():
    G = np.diag([2.0, 4.0])
    a = np.array([2.0, 4.0])
    res = solve_qp(G, a)
    assert res.status == "optimal"
    assert np.allclose(res.x, [1.0, 1.0])


def test_equality_only_matches_kkt():
    rng = np.random.default_rng(3)
    n, me = 6, 2
    G = random_psd(rng, n)
    a = rng.normal(size=n)
    A = rng.normal(size=(me, n))
    b = rng.normal(size=me)
    res = solve_qp(G, a, A, b, meq=me)
    assert res.status == "optimal"
    K = np.block([[G, -A.T], [A, np.zeros((me, me))]])
    rhs = np.concatenate([a, b])
    ref = np.linalg.solve(K, rhs)[:n]
    assert np.allclose(res.x, ref, atol=1e-9)
    assert np.max(np.abs(A @ res.x - b)) <= 1e-9


def test_simple_box():
    # min (x-2)^2 + (y+1)^2 s.t. x <= 1, y >= 0
    G = 2 * np.eye(2)
    a = np.array([4.0, -2.0])
    A = np.array([[-1.0, 0.0], [0.0, 1.0]])
    b = np.array([-1.0, 0.0])
    res = solve_qp(G, a, A, b)
    assert res.status == "optimal"
    assert np.allclose(res.x, [1.0, 0.0], atol=1e-10)
    assert np.all(res.lam >= -1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_random_against_cvxopt(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(3, 12)
    m_in = rng.integers(2, 3 * n)
    meq = int(rng.integers(0, min(3, n - 1)))
    G = random_psd(rng, n, cond=50.0)
    a = rng.normal(size=n)
    A = rng.normal(size=(meq + m_in, n))
    x_feas = rng.normal(size=n) * 0.3
    b = A @ x_feas - np.concatenate([np.zeros(meq), rng.uniform(0.0, 1.0, m_in)])
    res = solve_qp(G, a, A, b, meq=meq)
    ref, status = cvxopt_reference(G, a, A, b, meq)
    assert res.status == "optimal"
    assert status == "optimal"
    obj = 0.5 * res.x @ G @ res.x - a @ res.x
    obj_ref = 0.5 * ref @ G @ ref - a @ ref
    assert obj <= obj_ref + 1e-7 * (1 + abs(obj_ref))
    assert np.allclose(res.x, ref, atol=1e-5)
    # feasibility and complementarity
    s = A @ res.x - b
    assert np.max(np.abs(s[:meq]), initial=0.0) <= 1e-9
    assert np.min(s[meq:], initial=0.0) >= -1e-9
    assert np.max(np.abs(res.lam[meq:] * s[meq:]), initial=0.0) <= 1e-6


def test_kkt_stationarity_of_solution():
    rng = np.random.default_rng(11)
    n, meq, m_in = 8, 2, 12
    G = random_psd(rng, n)
    a = rng.normal(size=n)
    A = rng.normal(size=(meq + m_in, n))
    b = A @ (0.2 * rng.normal(size=n)) - np.concatenate(
        [np.zeros(meq), rng.uniform(0, 1, m_in)]
    )
    res = solve_qp(G, a, A, b, meq=meq)
    assert res.status == "optimal"
    grad = G @ res.x - a - A.T @ res.lam
    assert np.max(np.abs(grad)) <= 1e-8


def test_infeasible_detected():
    G = np.eye(2)
    a = np.zeros(2)
    A = np.array([[1.0, 0.0], [-1.0, 0.0]])
    b = np.array([1.0, 0.0])  # x >= 1 and x <= 0
    res = solve_qp(G, a, A, b)
    assert res.status == "infeasible"


def test_elastic_resolves_infeasible():
    G = np.eye(2)
    a = np.zeros(2)
    A = np.array([[1.0, 0.0], [-1.0, 0.0]])
    b = np.array([1.0, 0.0])
    res, slack = solve_qp_elastic(G, a, A, b, penalty=100.0)
    assert res.status == "optimal"
    assert slack >= 0.45  # must give roughly half the gap to each side


def test_elastic_zero_slack_when_feasible():
    G = np.eye(2)
    a = np.array([5.0, 0.0])
    A = np.array([[-1.0, 0.0]])
    b = np.array([-1.0])  # x <= 1
    res, slack = solve_qp_elastic(G, a, A, b, penalty=1e6)
    assert res.status == "optimal"
    assert slack <= 1e-6
    assert np.allclose(res.x, [1.0, 0.0], atol=1e-5)
