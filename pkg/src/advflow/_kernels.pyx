# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused dense-layer kernels.

Matrix products go through BLAS dgemm (via scipy's Cython bindings); bias,
activation and the activation derivative are fused into single passes so no
numpy temporaries are allocated per layer.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    IDENTITY = 0
    SILU = 1
    TANH = 2


cdef inline double _sigmoid(double u) nogil:
    # branch-free so the loops vectorize; the clamp keeps exp finite
    u = min(max(u, -60.0), 60.0)
    return 1.0 / (1.0 + exp(-u))


cdef void _gemm(char ta, char tb, int m, int n, int k,
                double *a, int lda, double *b, int ldb,
                double *c, int ldc) nogil:
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


def dense_forward(x, W, b, int act):
    """Return ``(pre, out)`` for ``out = act(x @ W + b)``."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] Wa = np.ascontiguousarray(W, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] ba = np.ascontiguousarray(b, dtype=np.float64)
    cdef int m = xa.shape[0], k = xa.shape[1], n = Wa.shape[1]
    if Wa.shape[0] != k or ba.shape[0] != n:
        raise ValueError("dense_forward: shape mismatch")
    if act not in (IDENTITY, SILU, TANH):
        raise ValueError(f"unknown activation code {act}")
    cdef cnp.ndarray[double, ndim=2, mode="c"] pre = np.empty((m, n), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] out
    cdef double *p = &pre[0, 0] if m * n > 0 else NULL
    cdef double *o
    cdef double *bp = &ba[0] if n > 0 else NULL
    cdef Py_ssize_t i, j
    cdef double u
    if m == 0 or n == 0:
        return pre, pre if act == IDENTITY else pre.copy()
    if k == 0:
        pre[:, :] = 0.0
    else:
        _gemm(b'N', b'N', n, m, k, &Wa[0, 0], n, &xa[0, 0], k, p, n)
    if act == IDENTITY:
        with nogil:
            for i in range(m):
                for j in range(n):
                    p[i * n + j] += bp[j]
        return pre, pre
    out = np.empty((m, n), dtype=np.float64)
    o = &out[0, 0]
    with nogil:
        if act == SILU:
            for i in range(m):
                for j in range(n):
                    u = p[i * n + j] + bp[j]
                    p[i * n + j] = u
                    o[i * n + j] = u * _sigmoid(u)
        else:
            for i in range(m):
                for j in range(n):
                    p[i * n + j] += bp[j]
    if act == TANH:
        # numpy's SIMD tanh beats any scalar libm loop here
        np.tanh(pre, out=out)
    return pre, out


def dense_backward(x, W, pre, out, grad_out, int act):
    """Return ``(grad_x, grad_W, grad_b)`` for one dense layer."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] Wa = np.ascontiguousarray(W, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] pa = np.ascontiguousarray(pre, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] oa = np.ascontiguousarray(out, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] ga = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef int m = xa.shape[0], k = xa.shape[1], n = Wa.shape[1]
    if ga.shape[0] != m or ga.shape[1] != n or Wa.shape[0] != k:
        raise ValueError("dense_backward: shape mismatch")
    if act not in (IDENTITY, SILU, TANH):
        raise ValueError(f"unknown activation code {act}")
    cdef cnp.ndarray[double, ndim=2, mode="c"] delta
    cdef cnp.ndarray[double, ndim=2, mode="c"] gx = np.empty((m, k), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] gW = np.empty((k, n), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] gb = np.zeros(n, dtype=np.float64)
    cdef double *d
    cdef double *g
    cdef double *pp
    cdef double *op
    cdef double *gbp
    cdef Py_ssize_t i, j
    cdef double s, u
    if m == 0 or n == 0 or k == 0:
        gx[:, :] = 0.0
        gW[:, :] = 0.0
    if m == 0 or n == 0:
        return gx, gW, gb
    if act == IDENTITY:
        delta = ga
    else:
        delta = np.empty((m, n), dtype=np.float64)
        d = &delta[0, 0]
        g = &ga[0, 0]
        pp = &pa[0, 0]
        op = &oa[0, 0]
        with nogil:
            if act == SILU:
                for i in range(m * n):
                    u = pp[i]
                    s = _sigmoid(u)
                    d[i] = g[i] * (s * (1.0 + u * (1.0 - s)))
            else:
                for i in range(m * n):
                    d[i] = g[i] * (1.0 - op[i] * op[i])
    d = &delta[0, 0]
    gbp = &gb[0]
    with nogil:
        for i in range(m):
            for j in range(n):
                gbp[j] += d[i * n + j]
    if k > 0:
        _gemm(b'N', b'T', n, k, m, d, n, &xa[0, 0], k, &gW[0, 0], n)
        _gemm(b'T', b'N', k, m, n, &Wa[0, 0], n, d, n, &gx[0, 0], k)
    return gx, gW, gb
