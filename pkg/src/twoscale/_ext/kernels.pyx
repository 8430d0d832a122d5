# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused loops over tensor quadrature grids (macro points x micro points)."""
import numpy as np


cdef inline double _clip(double x, double cap) noexcept nogil:
    x = x if x > 0.0 else 0.0
    return x if x < cap else cap


cdef void _reaction_row(const double* v, const double* w, const double* wy, double* h, Py_ssize_t n,
                        int code, double s, double cap) noexcept nogil:
    cdef Py_ssize_t r
    if code == 1:
        for r in range(n):
            h[r] = s * wy[r] * (v[r] + w[r])
    else:
        for r in range(n):
            h[r] = s * wy[r] * _clip(v[r], cap) * _clip(w[r], cap)


def weighted_reaction(const double[:, ::1] V, const double[:, ::1] W, int code, double k,
                      double cap, const double[::1] wx, const double[::1] wy):
    cdef Py_ssize_t nq = V.shape[0], nr = V.shape[1], q
    if code == 0:
        return np.zeros((nq, nr))
    out = np.empty((nq, nr))
    cdef double[:, ::1] H = out
    if nq == 0 or nr == 0:
        return out
    with nogil:
        for q in range(nq):
            _reaction_row(&V[q, 0], &W[q, 0], &wy[0], &H[q, 0], nr, code, wx[q] * k, cap)
    return out


def tensor_sq_error(const double[:, ::1] F, const double[:, ::1] X, const double[:, ::1] Y,
                    const double[::1] wx, const double[::1] wy):
    """``sum_qr wx_q wy_r (sum_k X_qk Y_rk - F_qr)^2`` without the dense temporary."""
    cdef Py_ssize_t nq = F.shape[0], nr = F.shape[1], nk = X.shape[1], q, r, j
    cdef double total = 0.0, row, d
    # transpose Y so the inner loop over r is contiguous for each j
    cdef double[:, ::1] Yt = np.ascontiguousarray(np.asarray(Y).T)
    cdef double[::1] acc = np.empty(nr)
    cdef const double* f
    cdef double* a
    cdef const double* y
    cdef double xq
    if nq == 0 or nr == 0:
        return 0.0
    with nogil:
        a = &acc[0]
        for q in range(nq):
            f = &F[q, 0]
            for r in range(nr):
                a[r] = -f[r]
            for j in range(nk):
                xq = X[q, j]
                y = &Yt[j, 0]
                for r in range(nr):
                    a[r] += xq * y[r]
            row = 0.0
            for r in range(nr):
                d = a[r]
                row += wy[r] * d * d
            total += wx[q] * row
    return total
