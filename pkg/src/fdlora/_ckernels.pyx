# cython: language_level=3
"""Compiled twins of fdlora._kernels_py (same signatures, same op order)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, pow

cnp.import_array()


# Above this many multiply-adds BLAS beats the plain loop (see benchmarks/).
LOOP_MAX_FLOPS = 512


def matmul(a_obj, b_obj):
    cdef const double[:, :] a = a_obj
    cdef const double[:, :] b = b_obj
    cdef Py_ssize_t n = a.shape[0], p = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aik
    if b.shape[0] != p:
        raise ValueError(f"matmul shapes {a.shape[0]}x{p} and {b.shape[0]}x{m}")
    if n * p * m > LOOP_MAX_FLOPS:
        return np.dot(a_obj, b_obj)
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for k in range(p):
            aik = a[i, k]
            for j in range(m):
                o[i, j] += aik * b[k, j]
    return out


def softmax_xent(const double[:, :] logits, const cnp.int64_t[:] labels, double scale):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, total, e
    cdef cnp.int64_t y
    losses = np.empty(n, dtype=np.float64)
    grad = np.empty((n, c), dtype=np.float64)
    cdef double[::1] lo = losses
    cdef double[:, ::1] gr = grad
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        total = 0.0
        for j in range(c):
            e = exp(logits[i, j] - mx)
            gr[i, j] = e
            total += e
        y = labels[i]
        lo[i] = log(total) - (logits[i, y] - mx)
        for j in range(c):
            gr[i, j] = gr[i, j] / total
        gr[i, y] -= 1.0
        for j in range(c):
            gr[i, j] *= scale
    return losses, grad


def adamw_update(const double[:, :] p, const double[:, :] g, const double[:, :] m,
                 const double[:, :] v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, long step):
    cdef Py_ssize_t r = p.shape[0], c = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double decay = lr * weight_decay
    cdef double mn, vn, pn, gij
    p_out = np.empty((r, c), dtype=np.float64)
    m_out = np.empty((r, c), dtype=np.float64)
    v_out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] po = p_out, mo = m_out, vo = v_out
    for i in range(r):
        for j in range(c):
            gij = g[i, j]
            mn = beta1 * m[i, j] + (1.0 - beta1) * gij
            vn = beta2 * v[i, j] + (1.0 - beta2) * (gij * gij)
            pn = p[i, j] - lr * (mn / bc1) / (sqrt(vn / bc2) + eps)
            po[i, j] = pn - decay * pn
            mo[i, j] = mn
            vo[i, j] = vn
    return p_out, m_out, v_out


def nesterov_update(const double[:, :] theta, const double[:, :] delta,
                    const double[:, :] buf, double lr, double momentum):
    cdef Py_ssize_t r = theta.shape[0], c = theta.shape[1]
    cdef Py_ssize_t i, j
    cdef double bn
    theta_out = np.empty((r, c), dtype=np.float64)
    buf_out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] to = theta_out, bo = buf_out
    for i in range(r):
        for j in range(c):
            bn = momentum * buf[i, j] + delta[i, j]
            bo[i, j] = bn
            to[i, j] = theta[i, j] - lr * (delta[i, j] + momentum * bn)
    return theta_out, buf_out
