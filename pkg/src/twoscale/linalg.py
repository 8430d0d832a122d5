"""Preconditioned CG, Kronecker operators and the coupled block solve.

Tensor coefficient vectors use the micro-fastest layout: entry ``i*N2 + j``
multiplies ``phi_i(x) psi_j(y)``, so a vector reshapes to an ``(N1, N2)``
array ``X`` and ``(A kron B) vec(X) = vec(A X B^T)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual, iterations):
        super().__init__(f"{msg} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    history: list = field(default_factory=list, repr=False)


def _as_matvec(op):
    if callable(op) and not hasattr(op, "shape"):
        return op
    if hasattr(op, "matvec"):
        return op.matvec
    return lambda x: op @ x


def default_maxit(n: int) -> int:
    return int(10 * math.sqrt(n)) + 200


def cg_solve(op, rhs, tol: float = 1e-10, maxit: int | None = None, precond=None,
             x0=None) -> tuple[np.ndarray, SolveInfo]:
    """Preconditioned conjugate gradients for an SPD operator.

    ``op`` may be a matrix, a LinearOperator or a callable ``x -> A x``;
    ``precond`` applies an approximate inverse. Stops when
    ``|A x - b| <= tol |b|``. Raises :class:`ConvergenceError` carrying the
    final relative residual when ``maxit`` is exhausted.
    """
    A = _as_matvec(op)
    Minv = (lambda r: r) if precond is None else _as_matvec(precond)
    b = np.asarray(rhs, dtype=float)
    n = b.size
    maxit = default_maxit(n) if maxit is None else maxit
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveInfo(0, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x) if x0 is not None else b.copy()
    res = np.linalg.norm(r) / bnorm
    hist = [res]
    if res <= tol:
        return x, SolveInfo(0, res, hist)
    z = Minv(r)
    p = z.copy()
    rz = r @ z
    for k in range(1, maxit + 1):
        Ap = A(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError("operator is not positive definite", res, k)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        hist.append(res)
        if res <= tol:
            return x, SolveInfo(k, res, hist)
        z = Minv(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError("CG did not converge", res, maxit)


@dataclass
class KroneckerOperator:
    """``A kron B`` acting on micro-fastest vectors of length ``N1*N2``."""

    A: object
    B: object

    @property
    def shape(self):
        return (self.A.shape[0] * self.B.shape[0], self.A.shape[1] * self.B.shape[1])

    def matmat(self, X: np.ndarray) -> np.ndarray:
        """Apply to an ``(N1, N2)`` coefficient array."""
        AX = self.A @ X
        return np.asarray((self.B @ np.asarray(AX).T).T)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.size != self.shape[1]:
            raise ValueError(f"vector of length {x.size} for operator of shape {self.shape}")
        return self.matmat(x.reshape(self.A.shape[1], self.B.shape[1])).ravel()

    def __matmul__(self, x):
        return self.matvec(x)

    def todense(self) -> np.ndarray:
        A = self.A.toarray() if sp.issparse(self.A) else np.asarray(self.A)
        B = self.B.toarray() if sp.issparse(self.B) else np.asarray(self.B)
        return np.kron(A, B)


def kron_apply(k: KroneckerOperator, x: np.ndarray) -> np.ndarray:
    return k.matvec(x)


@dataclass
class BlockKronSystem:
    """Symmetric three-block system of one implicit time step.

    Unknowns ``(a, b, c)`` with ``a`` of length ``Na`` and ``b, c`` of length
    ``N1*N2``::

        [ Aaa                 coef*(R Mx kron t^T)   0        ] [a]
        [ coef*(Mx R^T kron t)    Mx kron Ab         0        ] [b]
        [ 0                       0                  Mx kron Ac] [c]

    ``R`` selects the unknown macro DOFs among all ``N1`` macro DOFs.
    """

    Aaa: sp.csr_matrix
    Mx: sp.csr_matrix
    Ab: sp.csr_matrix
    Ac: sp.csr_matrix
    t: np.ndarray
    R: sp.csr_matrix
    coef: float

    @property
    def sizes(self):
        return self.Aaa.shape[0], self.Mx.shape[0] * self.Ab.shape[0], self.Mx.shape[0] * self.Ac.shape[0]

    @property
    def shape(self):
        n = sum(self.sizes)
        return (n, n)

    def split(self, x):
        na, nb, _ = self.sizes
        return x[:na], x[na:na + nb], x[na + nb:]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        a, b, c = self.split(np.asarray(x, dtype=float))
        N1, N2 = self.Mx.shape[0], self.Ab.shape[0]
        Bm = b.reshape(N1, N2)
        MB = self.Mx @ Bm
        ya = self.Aaa @ a + self.coef * (self.R @ (MB @ self.t))
        yb = np.asarray((self.Ab @ MB.T).T) + self.coef * np.outer(self.Mx @ (self.R.T @ a), self.t)
        yc = KroneckerOperator(self.Mx, self.Ac).matvec(c)
        return np.concatenate([ya, yb.ravel(), yc])

    def jacobi(self) -> np.ndarray:
        dx = self.Mx.diagonal()
        return np.concatenate([self.Aaa.diagonal(), np.kron(dx, self.Ab.diagonal()),
                               np.kron(dx, self.Ac.diagonal())])

    def todense(self) -> np.ndarray:
        M = self.Mx.toarray()
        R = self.R.toarray()
        t = self.t[:, None]
        ab = self.coef * np.kron(R @ M, t.T)
        na, nb, nc = self.sizes
        out = np.zeros(self.shape)
        out[:na, :na] = self.Aaa.toarray()
        out[:na, na:na + nb] = ab
        out[na:na + nb, :na] = ab.T
        out[na:na + nb, na:na + nb] = np.kron(M, self.Ab.toarray())
        out[na + nb:, na + nb:] = np.kron(M, self.Ac.toarray())
        return out


class _Factorized:
    """Sparse LU factors reused across time steps."""

    def __init__(self, system: BlockKronSystem):
        self.system = system
        self.lu_x = spla.splu(sp.csc_matrix(system.Mx))
        self.lu_b = spla.splu(sp.csc_matrix(system.Ab))
        self.lu_c = spla.splu(sp.csc_matrix(system.Ac))
        self.z = self.lu_b.solve(system.t)
        sigma = float(system.t @ self.z)
        RMRt = system.R @ system.Mx @ system.R.T
        S = system.Aaa - system.coef ** 2 * sigma * RMRt
        self.lu_s = spla.splu(sp.csc_matrix(S)) if S.shape[0] else None

    def _kron_inv(self, lu_y, X):
        Y = self.lu_x.solve(np.ascontiguousarray(X))
        return lu_y.solve(np.ascontiguousarray(Y.T)).T

    def solve(self, rhs):
        s = self.system
        ra, rb, rc = s.split(rhs)
        N1, N2 = s.Mx.shape[0], s.Ab.shape[0]
        Rb = rb.reshape(N1, N2)
        if self.lu_s is not None:
            a = self.lu_s.solve(ra - s.coef * (s.R @ (Rb @ self.z)))
        else:
            a = np.zeros(0)
        b = self._kron_inv(self.lu_b, Rb) - s.coef * np.outer(s.R.T @ a, self.z)
        c = self._kron_inv(self.lu_c, rc.reshape(N1, -1))
        return np.concatenate([a, b.ravel(), c.ravel()])


def block_solve(system: BlockKronSystem, rhs: np.ndarray, tol: float = 1e-10,
                method: str = "cg", maxit: int | None = None, factors: _Factorized | None = None):
    """Solve the coupled step system.

    ``method="cg"`` runs Jacobi-preconditioned CG on the full block operator;
    ``method="schur"`` eliminates ``b`` and ``c`` exactly through the
    Kronecker structure (sparse LU of the small factors only).
    Returns ``(x, SolveInfo)``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.size != system.shape[0]:
        raise ValueError(f"rhs of length {rhs.size} for block system of size {system.shape[0]}")
    if method == "cg":
        d = system.jacobi()
        return cg_solve(system.matvec, rhs, tol=tol, maxit=maxit, precond=lambda r: r / d)
    if method == "schur":
        f = factors if factors is not None else _Factorized(system)
        x = f.solve(rhs)
        bn = np.linalg.norm(rhs)
        res = np.linalg.norm(system.matvec(x) - rhs) / bn if bn else 0.0
        return x, SolveInfo(0, float(res))
    raise ValueError(f"unknown block solver {method!r}")


def factorize(system: BlockKronSystem) -> _Factorized:
    return _Factorized(system)
