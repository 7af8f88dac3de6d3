import numpy as np
import pytest
import scipy.sparse as sp

from hubnet.oracle import enumerate_active_sets
from hubnet.qp import QPError, QuadraticProgram, Tolerances, solve_qp


def _qp(seed, n=4, me=1, mi=2):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(me, n))
    x0 = rng.uniform(0.2, 0.8, n)
    G = rng.normal(size=(mi, n))
    return QuadraticProgram(
        hess=rng.uniform(0.5, 3.0, n),
        lin=rng.normal(scale=3.0, size=n),
        A_eq=sp.csr_matrix(A),
        b_eq=A @ x0,
        A_ineq=sp.csr_matrix(G),
        b_ineq=G @ x0 + rng.uniform(0.0, 0.3, mi),
        lb=np.zeros(n),
        ub=np.ones(n) * 2.0,
    )


@pytest.mark.parametrize("seed", range(8))
def test_matches_enumeration(seed):
    qp = _qp(seed, n=3, me=1, mi=2)
    qp = QuadraticProgram(qp.hess, qp.lin, qp.A_eq, qp.b_eq, qp.A_ineq, qp.b_ineq, qp.lb,
                          np.full(3, np.inf))
    res = solve_qp(qp)
    ref = enumerate_active_sets(qp)
    assert res.status == "optimal"
    assert np.abs(res.y - ref.y).max() < 1e-7
    assert res.objective == pytest.approx(ref.objective, abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_kkt_conditions(seed):
    qp = _qp(seed, n=6, me=2, mi=3)
    r = solve_qp(qp)
    y = r.y
    stat = qp.hess * y + qp.lin + qp.A_eq.T @ r.eq_dual + qp.A_ineq.T @ r.ineq_dual - r.lower_dual + r.upper_dual
    assert np.abs(stat).max() < 1e-7
    assert np.abs(qp.A_eq @ y - qp.b_eq).max() < 1e-8
    assert np.all(qp.A_ineq @ y <= qp.b_ineq + 1e-8)
    assert np.all(r.ineq_dual >= 0) and np.all(r.lower_dual >= 0) and np.all(r.upper_dual >= 0)
    assert np.abs(r.ineq_dual * (qp.b_ineq - qp.A_ineq @ y)).max() < 1e-8


def test_warm_start_same_answer():
    qp = _qp(11, n=6, me=2, mi=3)
    cold = solve_qp(qp)
    warm = solve_qp(qp, Tolerances(), cold.active)
    assert np.abs(cold.y - warm.y).max() < 1e-9


def test_infeasible_raises():
    qp = QuadraticProgram(np.ones(1), np.zeros(1), sp.csr_matrix([[1.0]]), np.array([5.0]),
                          sp.csr_matrix((0, 1)), np.zeros(0), np.zeros(1), np.ones(1))
    with pytest.raises(QPError):
        solve_qp(qp)
