import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idyn.convex_qp import Qp, nullspace_basis, solve_qp
from idyn.errors import Infeasible, Unbounded


def test_interior_optimum():
    x, _, d = solve_qp(Qp([[1.0]], [-1.0], lb_zero=[0]))
    assert x == pytest.approx([1.0])
    assert d.stationarity < 1e-10


def test_active_bound():
    x, duals, _ = solve_qp(Qp([[1.0]], [-1.0], [[1.0]], [2.0]))
    assert x == pytest.approx([2.0]) and duals[0] == pytest.approx(1.0)


def test_halfplane():
    x, duals, _ = solve_qp(Qp(np.eye(2), np.zeros(2), [[1.0, 1.0]], [2.0]))
    assert x == pytest.approx([1.0, 1.0]) and duals[0] == pytest.approx(1.0)


def test_infeasible():
    with pytest.raises(Infeasible):
        solve_qp(Qp(np.eye(1), [0.0], [[1.0], [-1.0]], [1.0, 0.0]))


def test_unbounded():
    with pytest.raises(Unbounded):
        solve_qp(Qp(np.zeros((1, 1)), [-1.0], lb_zero=[0]))


def test_semidefinite_with_free_variable():
    # x0 free and absent from the objective except through the constraint
    H = np.diag([0.0, 1.0])
    x, _, _ = solve_qp(Qp(H, [0.0, 0.0], [[1.0, 1.0], [-1.0, 0.0]], [1.0, -3.0]))
    assert x[0] + x[1] >= 1 - 1e-9 and x[0] <= 3 + 1e-9
    assert 0.5 * x[1] ** 2 == pytest.approx(0.0, abs=1e-12)


def test_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        Qp([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_kkt_property(n, m, seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n, n))
    H = G @ G.T + 0.1 * np.eye(n)
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    b = A @ x0 - rng.uniform(0, 1, m)  # x0 is strictly feasible
    q = Qp(H, rng.normal(size=n), A, b)
    x, lam, d = solve_qp(q)
    assert np.all(A @ x - b >= -1e-8) and np.all(lam >= -1e-10)
    assert np.allclose(H @ x + q.c, A.T @ lam, atol=1e-7)
    # no feasible point does better than x
    for _ in range(20):
        y = x0 + 0.5 * rng.normal(size=n)
        if np.all(A @ y >= b):
            assert q.objective(y) >= q.objective(x) - 1e-9


class TestNullspace:
    def test_diagonal(self):
        W = nullspace_basis([[1.0, 0.0], [0.0, 0.0]])
        assert W.shape == (2, 1) and abs(abs(W[1, 0]) - 1) < 1e-14

    def test_identity(self):
        assert nullspace_basis(np.eye(4)).shape == (4, 0)

    def test_rank_one(self, rng):
        v = rng.normal(size=4)
        W = nullspace_basis(np.outer(v, v))
        assert W.shape == (4, 3)
        assert np.allclose(W.T @ v, 0, atol=1e-12)
        assert np.allclose(W.T @ W, np.eye(3), atol=1e-12)

    def test_max_dim_keeps_smallest(self):
        A = np.diag([1.0, 1e-13, 0.0])
        W = nullspace_basis(A, max_dim=1)
        assert W.shape == (3, 1) and abs(W[2, 0]) == pytest.approx(1.0)
