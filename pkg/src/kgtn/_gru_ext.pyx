# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gated-update cell: BLAS matmuls + fused elementwise loops.

Same contract as `kgtn._kernels_py`; selected by `kgtn.backend` at import.
The win over the numpy path is per-call overhead: one fused loop replaces
roughly a dozen small temporaries per cell invocation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

NAME = "ext"


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


# Row-major GEMM wrappers.  BLAS is column-major, so a row-major product
# C = op(A)·op(B) is computed as the column-major product C^T = op(B)^T·op(A)^T.

cdef void _mm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(m,k) @ B(k,n) + beta*C
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[1]
    cdef double alpha = 1.0
    cdef char tn = b'N'
    dgemm(&tn, &tn, &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &k, &beta, &C[0, 0], &n)


cdef void _mm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(m,k) @ B(n,k)^T + beta*C
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[0]
    cdef double alpha = 1.0
    cdef char tn = b'N', tt = b'T'
    dgemm(&tt, &tn, &n, &m, &k, &alpha, &B[0, 0], &k, &A[0, 0], &k, &beta, &C[0, 0], &n)


cdef void _mm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, double beta) noexcept nogil:
    # C(m,n) = A(k,m)^T @ B(k,n) + beta*C
    cdef int m = A.shape[1], k = A.shape[0], n = B.shape[1]
    cdef double alpha = 1.0
    cdef char tn = b'N', tt = b'T'
    dgemm(&tn, &tt, &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &m, &beta, &C[0, 0], &n)


def gru_cell_forward(object a_in, object h_in, object wz_in, object uz_in,
                     object wr_in, object ur_in, object w_in, object u_in):
    a_np = np.ascontiguousarray(a_in)
    h_np = np.ascontiguousarray(h_in)
    cdef double[:, ::1] a = a_np, h = h_np
    cdef double[:, ::1] wz = np.ascontiguousarray(wz_in), uz = np.ascontiguousarray(uz_in)
    cdef double[:, ::1] wr = np.ascontiguousarray(wr_in), ur = np.ascontiguousarray(ur_in)
    cdef double[:, ::1] w = np.ascontiguousarray(w_in), u = np.ascontiguousarray(u_in)
    cdef Py_ssize_t K = h.shape[0], d = h.shape[1], i, j

    z_np = np.empty((K, d))
    r_np = np.empty((K, d))
    c_np = np.empty((K, d))
    hn_np = np.empty((K, d))
    rh_np = np.empty((K, d))
    cdef double[:, ::1] z = z_np, r = r_np, c = c_np, hn = hn_np, rh = rh_np

    with nogil:
        _mm_nt(a, wz, z, 0.0)
        _mm_nt(h, uz, z, 1.0)
        _mm_nt(a, wr, r, 0.0)
        _mm_nt(h, ur, r, 1.0)
        for i in range(K):
            for j in range(d):
                z[i, j] = _sig(z[i, j])
                r[i, j] = _sig(r[i, j])
                rh[i, j] = r[i, j] * h[i, j]
        _mm_nt(a, w, c, 0.0)
        _mm_nt(rh, u, c, 1.0)
        for i in range(K):
            for j in range(d):
                c[i, j] = tanh(c[i, j])
                hn[i, j] = (1.0 - z[i, j]) * h[i, j] + z[i, j] * c[i, j]
    return hn_np, (z_np, r_np, c_np)


def gru_cell_backward(object g_in, object a_in, object h_in, object wz_in,
                      object uz_in, object wr_in, object ur_in, object w_in,
                      object u_in, cache):
    g_np = np.ascontiguousarray(g_in)
    a_np = np.ascontiguousarray(a_in)
    h_np = np.ascontiguousarray(h_in)
    cdef double[:, ::1] g = g_np, a = a_np, h = h_np
    cdef double[:, ::1] wz = np.ascontiguousarray(wz_in), uz = np.ascontiguousarray(uz_in)
    cdef double[:, ::1] wr = np.ascontiguousarray(wr_in), ur = np.ascontiguousarray(ur_in)
    cdef double[:, ::1] w = np.ascontiguousarray(w_in), u = np.ascontiguousarray(u_in)
    cdef double[:, ::1] z = np.ascontiguousarray(cache[0])
    cdef double[:, ::1] r = np.ascontiguousarray(cache[1])
    cdef double[:, ::1] c = np.ascontiguousarray(cache[2])
    cdef Py_ssize_t K = h.shape[0], d = h.shape[1], d2 = a.shape[1], i, j
    cdef double dzv, dcv, drv

    da_np = np.empty((K, d2))
    dh_np = np.empty((K, d))
    dwz_np = np.empty((d, d2)); duz_np = np.empty((d, d))
    dwr_np = np.empty((d, d2)); dur_np = np.empty((d, d))
    dw_np = np.empty((d, d2)); du_np = np.empty((d, d))
    dca_np = np.empty((K, d)); drh_np = np.empty((K, d))
    dza_np = np.empty((K, d)); dra_np = np.empty((K, d))
    rh_np = np.empty((K, d))
    cdef double[:, ::1] da = da_np, dh = dh_np
    cdef double[:, ::1] dwz = dwz_np, duz = duz_np, dwr = dwr_np, dur = dur_np
    cdef double[:, ::1] dw = dw_np, du = du_np
    cdef double[:, ::1] dca = dca_np, drh = drh_np, dza = dza_np, dra = dra_np, rh = rh_np

    with nogil:
        for i in range(K):
            for j in range(d):
                dzv = g[i, j] * (c[i, j] - h[i, j])
                dcv = g[i, j] * z[i, j]
                dh[i, j] = g[i, j] * (1.0 - z[i, j])
                dca[i, j] = dcv * (1.0 - c[i, j] * c[i, j])
                dza[i, j] = dzv * z[i, j] * (1.0 - z[i, j])
        _mm_nn(dca, u, drh, 0.0)
        for i in range(K):
            for j in range(d):
                drv = drh[i, j] * h[i, j]
                dh[i, j] += drh[i, j] * r[i, j]
                dra[i, j] = drv * r[i, j] * (1.0 - r[i, j])
                rh[i, j] = r[i, j] * h[i, j]
        _mm_nn(dca, w, da, 0.0)
        _mm_nn(dza, wz, da, 1.0)
        _mm_nn(dra, wr, da, 1.0)
        _mm_nn(dza, uz, dh, 1.0)
        _mm_nn(dra, ur, dh, 1.0)
        _mm_tn(dza, a, dwz, 0.0)
        _mm_tn(dza, h, duz, 0.0)
        _mm_tn(dra, a, dwr, 0.0)
        _mm_tn(dra, h, dur, 0.0)
        _mm_tn(dca, a, dw, 0.0)
        _mm_tn(dca, rh, du, 0.0)
    return da_np, dh_np, dwz_np, duz_np, dwr_np, dur_np, dw_np, du_np
