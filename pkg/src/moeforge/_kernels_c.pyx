# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled compute kernels.

This module is the bit-for-bit twin of moeforge._kernels_py: identical
IEEE-754 operations in identical order (build uses -ffp-contract=off so
no multiply-adds get fused). Keep the two files in lockstep; the pure
file documents the contract and tests/test_backends.py enforces it.

cdivision only changes integer division semantics; all float divisions
below are plain IEEE divisions either way.
"""

from libc.math cimport erf, exp, pow, sqrt

cdef double _INV_SQRT2 = sqrt(0.5)
cdef double _INV_SQRT2PI = 1.0 / sqrt(2.0 * 3.141592653589793)


def fill(double[::1] x, double value, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        x[i] = value


def copy(double[::1] src, double[::1] dst, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        dst[i] = src[i]


def add3(double[::1] x, double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = (x[i] + a[i]) + b[i]


def add_scaled(double[::1] y, double[::1] x, double alpha, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        y[i] += alpha * x[i]


def scaled_copy(double[::1] x, double alpha, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = alpha * x[i]


def dot(double[::1] x, double[::1] y, Py_ssize_t n):
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += x[i] * y[i]
    return acc


def vecmat(double[::1] x, double[::1] w, Py_ssize_t n_in, Py_ssize_t n_out,
           double[::1] out):
    cdef Py_ssize_t i, j, row
    cdef double xi
    for j in range(n_out):
        out[j] = 0.0
    for i in range(n_in):
        xi = x[i]
        row = i * n_out
        for j in range(n_out):
            out[j] += xi * w[row + j]


def matvec(double[::1] w, double[::1] x, Py_ssize_t n_rows, Py_ssize_t n_cols,
           double[::1] out):
    cdef Py_ssize_t i, j, row
    cdef double acc
    for i in range(n_rows):
        acc = 0.0
        row = i * n_cols
        for j in range(n_cols):
            acc += w[row + j] * x[j]
        out[i] = acc


def linear_forward(double[::1] x, double[::1] w, double[::1] b,
                   Py_ssize_t n_in, Py_ssize_t n_out, double[::1] out):
    cdef Py_ssize_t i, j, row
    cdef double xi
    for j in range(n_out):
        out[j] = 0.0
    for i in range(n_in):
        xi = x[i]
        row = i * n_out
        for j in range(n_out):
            out[j] += xi * w[row + j]
    for j in range(n_out):
        out[j] += b[j]


def linear_backward(double[::1] x, double[::1] w, Py_ssize_t n_in, Py_ssize_t n_out,
                    double[::1] gout, double[::1] dw, double[::1] db, double[::1] dx):
    cdef Py_ssize_t i, j, row
    cdef double xi, acc
    if dw is not None:
        for i in range(n_in):
            xi = x[i]
            row = i * n_out
            for j in range(n_out):
                dw[row + j] += xi * gout[j]
    if db is not None:
        for j in range(n_out):
            db[j] += gout[j]
    if dx is not None:
        for i in range(n_in):
            acc = 0.0
            row = i * n_out
            for j in range(n_out):
                acc += w[row + j] * gout[j]
            dx[i] += acc


def layer_norm_forward(double[::1] x, double[::1] gamma, double[::1] beta,
                       double eps, Py_ssize_t n, double[::1] out, double[::1] stats):
    cdef Py_ssize_t i
    cdef double s = 0.0, q = 0.0, d, mean, inv
    for i in range(n):
        s += x[i]
    mean = s / n
    for i in range(n):
        d = x[i] - mean
        q += d * d
    inv = 1.0 / sqrt(q / n + eps)
    stats[0] = mean
    stats[1] = inv
    for i in range(n):
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i]


def layer_norm_backward(double[::1] x, double[::1] gamma, double[::1] stats,
                        double[::1] gout, double[::1] dgamma, double[::1] dbeta,
                        double[::1] dx, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double mean = stats[0], inv = stats[1]
    cdef double m1 = 0.0, m2 = 0.0, z, dz
    for i in range(n):
        z = (x[i] - mean) * inv
        dz = gout[i] * gamma[i]
        if dgamma is not None:
            dgamma[i] += gout[i] * z
        if dbeta is not None:
            dbeta[i] += gout[i]
        m1 += dz
        m2 += dz * z
    m1 /= n
    m2 /= n
    for i in range(n):
        z = (x[i] - mean) * inv
        dz = gout[i] * gamma[i]
        dx[i] += ((dz - m1) - z * m2) * inv


def gelu_forward(double[::1] x, Py_ssize_t n, double[::1] out):
    cdef Py_ssize_t i
    cdef double v, c
    for i in range(n):
        v = x[i]
        c = erf(v * _INV_SQRT2)
        out[i] = 0.5 * (v * (1.0 + c))


def gelu_backward(double[::1] x, double[::1] gout, Py_ssize_t n, double[::1] out):
    cdef Py_ssize_t i
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = exp(-0.5 * (v * v)) * _INV_SQRT2PI
        out[i] = gout[i] * (cdf + v * pdf)


def softmax(double[::1] x, Py_ssize_t n, double[::1] out):
    cdef Py_ssize_t i
    cdef double mx = x[0], s = 0.0, e
    for i in range(1, n):
        if x[i] > mx:
            mx = x[i]
    for i in range(n):
        e = exp(x[i] - mx)
        out[i] = e
        s += e
    for i in range(n):
        out[i] /= s


def adamw_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                 Py_ssize_t n, long step, double lr, double beta1, double beta2,
                 double eps, double weight_decay):
    cdef Py_ssize_t i
    cdef double decay = 1.0 - lr * weight_decay
    cdef double c1 = 1.0 - pow(beta1, <double> step)
    cdef double c2 = 1.0 - pow(beta2, <double> step)
    cdef double gi, mi, vi
    for i in range(n):
        p[i] *= decay
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= lr * ((mi / c1) / (sqrt(vi / c2) + eps))


def matmul(double[::1] a, double[::1] b, Py_ssize_t n, Py_ssize_t k, Py_ssize_t m,
           double[::1] out):
    cdef Py_ssize_t i, j, l, arow, orow, brow
    cdef double a_il
    for i in range(n * m):
        out[i] = 0.0
    for i in range(n):
        arow = i * k
        orow = i * m
        for l in range(k):
            a_il = a[arow + l]
            brow = l * m
            for j in range(m):
                out[orow + j] += a_il * b[brow + j]


def matmul_at(double[::1] a, double[::1] b, Py_ssize_t k, Py_ssize_t n, Py_ssize_t m,
              double[::1] out):
    cdef Py_ssize_t i, j, l, arow, brow, orow
    cdef double a_li
    for i in range(n * m):
        out[i] = 0.0
    for l in range(k):
        arow = l * n
        brow = l * m
        for i in range(n):
            a_li = a[arow + i]
            orow = i * m
            for j in range(m):
                out[orow + j] += a_li * b[brow + j]


def matmul_bt(double[::1] a, double[::1] b, Py_ssize_t n, Py_ssize_t k, Py_ssize_t m,
              double[::1] out):
    cdef Py_ssize_t i, j, l, arow, brow, orow
    cdef double acc
    for i in range(n):
        arow = i * k
        orow = i * m
        for j in range(m):
            brow = j * k
            acc = 0.0
            for l in range(k):
                acc += a[arow + l] * b[brow + l]
            out[orow + j] = acc


def l2_normalize(double[::1] x, Py_ssize_t n, double[::1] out):
    cdef Py_ssize_t i
    cdef double acc = 0.0, norm
    for i in range(n):
        acc += x[i] * x[i]
    norm = sqrt(acc)
    if norm == 0.0:
        for i in range(n):
            out[i] = x[i]
        return 0.0
    for i in range(n):
        out[i] = x[i] / norm
    return norm


def rowwise_sq_error(double[::1] a, double[::1] b, Py_ssize_t n, Py_ssize_t m,
                     double[::1] out):
    cdef Py_ssize_t i, j, row
    cdef double acc, d
    for i in range(n):
        row = i * m
        acc = 0.0
        for j in range(m):
            d = a[row + j] - b[row + j]
            acc += d * d
        out[i] = acc
