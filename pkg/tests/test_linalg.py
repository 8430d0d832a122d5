import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from twoscale.fem import FeSpaceMacro
from twoscale.geometry import MacroPartition
from twoscale.linalg import (BlockKronSystem, ConvergenceError, KroneckerOperator, block_solve, cg_solve,
                             kron_apply)


def spd(rng, n):
    A = rng.normal(size=(n, n))
    return sp.csr_matrix(A @ A.T + n * np.eye(n))


def test_cg_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, info = cg_solve(sp.identity(5), b)
    assert np.allclose(x, b) and info.iterations == 1


def test_cg_two_by_two():
    x, _ = cg_solve(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([1.0, 0.0]), tol=1e-14)
    assert np.allclose(x, [2 / 3, -1 / 3], atol=1e-13)


def test_cg_mass_consistency():
    M = FeSpaceMacro(MacroPartition.uniform(3)).mass
    one = np.ones(M.shape[0])
    x, info = cg_solve(M, M @ one, tol=1e-12)
    assert np.max(np.abs(x - 1)) < 1e-9
    assert info.residual <= 1e-12


def test_cg_zero_rhs_and_nonconvergence(rng):
    x, info = cg_solve(np.eye(3), np.zeros(3))
    assert not x.any() and info.iterations == 0
    A = spd(rng, 30)
    with pytest.raises(ConvergenceError) as exc:
        cg_solve(A, rng.normal(size=30), tol=1e-15, maxit=2)
    assert exc.value.residual > 0


def test_kron_examples(rng):
    x = rng.normal(size=12)
    assert np.allclose(kron_apply(KroneckerOperator(np.eye(3), np.eye(4)), x), x)
    assert kron_apply(KroneckerOperator(np.array([[2.0]]), np.array([[3.0]])), np.array([5.0]))[0] == 30.0
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(4, 4))
    assert np.max(np.abs(kron_apply(KroneckerOperator(A, B), x) - np.kron(A, B) @ x)) < 1e-13


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_kron_matches_dense(n1, n2, seed):
    r = np.random.default_rng(seed)
    A, B, x = r.normal(size=(n1, n1)), r.normal(size=(n2, n2)), r.normal(size=n1 * n2)
    K = KroneckerOperator(sp.csr_matrix(A), B)
    assert np.max(np.abs(K @ x - np.kron(A, B) @ x)) <= 1e-13 * max(1.0, np.abs(np.kron(A, B)).sum(1).max())


def random_block(rng, n1=4, n2=3, coef=0.3, n_free=None):
    n_free = n1 - 1 if n_free is None else n_free
    Mx = spd(rng, n1)
    Ab, Ac = spd(rng, n2), spd(rng, n2)
    free = np.sort(rng.choice(n1, size=n_free, replace=False))
    R = sp.identity(n1, format="csr")[free]
    t = np.abs(rng.normal(size=n2)) * 0.1
    Aaa = spd(rng, n_free) * 10
    return BlockKronSystem(sp.csr_matrix(Aaa), Mx, Ab, Ac, t, R, coef)


def test_block_matvec_matches_dense(rng):
    S = random_block(rng)
    x = rng.normal(size=S.shape[0])
    assert np.allclose(S.matvec(x), S.todense() @ x, atol=1e-12)


@pytest.mark.parametrize("method", ["cg", "schur"])
def test_block_solve_against_dense(rng, method):
    S = random_block(rng)
    b = rng.normal(size=S.shape[0])
    x, info = block_solve(S, b, tol=1e-13, method=method)
    assert np.allclose(x, np.linalg.solve(S.todense(), b), atol=1e-9)


def test_block_decoupled_equals_independent_solves(rng):
    S = random_block(rng, coef=0.0)
    b = rng.normal(size=S.shape[0])
    x, _ = block_solve(S, b, tol=1e-13, method="schur")
    ra, rb, rc = S.split(b)
    xa, _ = cg_solve(S.Aaa, ra, tol=1e-13)
    xb, _ = cg_solve(KroneckerOperator(S.Mx, S.Ab).matvec, rb, tol=1e-13)
    xc, _ = cg_solve(KroneckerOperator(S.Mx, S.Ac).matvec, rc, tol=1e-13)
    assert np.allclose(x, np.concatenate([xa, xb, xc]), atol=1e-9)


def test_block_scalar_closed_form():
    # 1x1 blocks: [[p, q, 0], [q, r, 0], [0, 0, s]]
    p, r, s, m, t, coef = 3.0, 2.0, 5.0, 0.5, 0.4, 1.5
    S = BlockKronSystem(sp.csr_matrix([[p]]), sp.csr_matrix([[m]]), sp.csr_matrix([[r / m]]),
                        sp.csr_matrix([[s / m]]), np.array([t]), sp.identity(1, format="csr"), coef)
    q = coef * m * t
    rhs = np.array([1.0, 2.0, 3.0])
    det = p * r - q * q
    exact = [(rhs[0] * r - q * rhs[1]) / det, (p * rhs[1] - q * rhs[0]) / det, rhs[2] / s]
    for method in ("cg", "schur"):
        x, _ = block_solve(S, rhs, tol=1e-14, method=method)
        assert np.allclose(x, exact, atol=1e-12)


def test_block_symmetry_probe(rng):
    S = random_block(rng, n1=5, n2=4)
    for _ in range(5):
        u, v = rng.normal(size=(2, S.shape[0]))
        assert abs(u @ S.matvec(v) - v @ S.matvec(u)) <= 1e-12 * max(1.0, abs(u @ S.matvec(v)))


def test_block_rejects_bad_input(rng):
    S = random_block(rng)
    with pytest.raises(ValueError):
        block_solve(S, np.ones(3))
    with pytest.raises(ValueError):
        block_solve(S, np.ones(S.shape[0]), method="lu")
