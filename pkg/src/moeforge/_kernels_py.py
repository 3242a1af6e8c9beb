"""Pure-Python compute kernels (fallback backend).

Bit-compatibility contract
--------------------------
Every function here has a compiled twin in ``moeforge._kernels_c`` that
performs the *same IEEE-754 double operations in the same order* (the
extension is built with -ffp-contract=off so the compiler cannot fuse
multiply-adds). Reductions always run left-to-right over ascending
indices. Given identical inputs, the two backends must produce
byte-identical outputs; tests/test_backends.py enforces this.

Do not "optimize" loop structure here unless the per-output-element
operation order is provably unchanged.

All buffers are flat float64 arrays (array('d') or anything exposing the
buffer protocol); matrices are row-major with explicit dimensions passed
by the caller. No shape checking happens at this layer.
"""

import math

_INV_SQRT2 = math.sqrt(0.5)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def fill(x, value, n):
    for i in range(n):
        x[i] = value


def copy(src, dst, n):
    for i in range(n):
        dst[i] = src[i]


def add3(x, a, b, out, n):
    # out = x + a + b, pinned as (x + a) + b
    for i in range(n):
        out[i] = (x[i] + a[i]) + b[i]


def add_scaled(y, x, alpha, n):
    # y += alpha * x
    for i in range(n):
        y[i] += alpha * x[i]


def scaled_copy(x, alpha, out, n):
    for i in range(n):
        out[i] = alpha * x[i]


def dot(x, y, n):
    acc = 0.0
    for i in range(n):
        acc += x[i] * y[i]
    return acc


def vecmat(x, w, n_in, n_out, out):
    # out[j] = sum_i x[i] * w[i, j], i ascending; w is (n_in x n_out) row-major.
    for j in range(n_out):
        out[j] = 0.0
    for i in range(n_in):
        xi = x[i]
        row = i * n_out
        for j in range(n_out):
            out[j] += xi * w[row + j]


def matvec(w, x, n_rows, n_cols, out):
    # out[i] = sum_j w[i, j] * x[j], j ascending.
    for i in range(n_rows):
        acc = 0.0
        row = i * n_cols
        for j in range(n_cols):
            acc += w[row + j] * x[j]
        out[i] = acc


def linear_forward(x, w, b, n_in, n_out, out):
    # out[j] = (sum_i x[i] * w[i, j]) + b[j]; bias added after the full sum.
    vecmat(x, w, n_in, n_out, out)
    for j in range(n_out):
        out[j] += b[j]


def linear_backward(x, w, n_in, n_out, gout, dw, db, dx):
    """Accumulate gradients of y = x @ w + b given dL/dy = gout.

    dw[i,j] += x[i]*gout[j]; db[j] += gout[j]; dx[i] += sum_j w[i,j]*gout[j].
    Any of dw/db/dx may be None to skip that output.
    """
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


def layer_norm_forward(x, gamma, beta, eps, n, out, stats):
    # Population statistics; stats receives [mean, inv_std] for the backward pass.
    s = 0.0
    for i in range(n):
        s += x[i]
    mean = s / n
    q = 0.0
    for i in range(n):
        d = x[i] - mean
        q += d * d
    inv = 1.0 / math.sqrt(q / n + eps)
    stats[0] = mean
    stats[1] = inv
    for i in range(n):
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i]


def layer_norm_backward(x, gamma, stats, gout, dgamma, dbeta, dx, n):
    # dx[i] += (dz_i - mean(dz) - z_i * mean(dz*z)) * inv_std, dz = gout*gamma.
    mean = stats[0]
    inv = stats[1]
    m1 = 0.0
    m2 = 0.0
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


def gelu_forward(x, n, out):
    # Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
    for i in range(n):
        v = x[i]
        c = math.erf(v * _INV_SQRT2)
        out[i] = 0.5 * (v * (1.0 + c))


def gelu_backward(x, gout, n, out):
    # out[i] = gout[i] * gelu'(x[i]); gelu'(x) = Phi(x) + x * phi(x). Overwrites out.
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * (v * v)) * _INV_SQRT2PI
        out[i] = gout[i] * (cdf + v * pdf)


def softmax(x, n, out):
    # Max-subtracted for stability; normalization by division, sum l-to-r.
    mx = x[0]
    for i in range(1, n):
        if x[i] > mx:
            mx = x[i]
    s = 0.0
    for i in range(n):
        e = math.exp(x[i] - mx)
        out[i] = e
        s += e
    for i in range(n):
        out[i] /= s


def adamw_update(p, g, m, v, n, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step (step is 1-based, already incremented).

    Decay is applied to the parameter BEFORE the moment update:
    p *= 1 - lr*wd, then p -= lr * mhat / (sqrt(vhat) + eps).
    """
    decay = 1.0 - lr * weight_decay
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(n):
        p[i] *= decay
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= lr * ((mi / c1) / (math.sqrt(vi / c2) + eps))


def matmul(a, b, n, k, m, out):
    # out (n x m) = a (n x k) @ b (k x m); per element, k-terms ascend.
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


def matmul_at(a, b, k, n, m, out):
    # out (n x m) = a.T @ b with a (k x n), b (k x m); per element, k-terms ascend.
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


def matmul_bt(a, b, n, k, m, out):
    # out (n x m) = a @ b.T with a (n x k), b (m x k); per element, k-terms ascend.
    for i in range(n):
        arow = i * k
        orow = i * m
        for j in range(m):
            brow = j * k
            acc = 0.0
            for l in range(k):
                acc += a[arow + l] * b[brow + l]
            out[orow + j] = acc


def l2_normalize(x, n, out):
    # Returns the Euclidean norm; out = x / norm. Zero vector copies through.
    acc = 0.0
    for i in range(n):
        acc += x[i] * x[i]
    norm = math.sqrt(acc)
    if norm == 0.0:
        for i in range(n):
            out[i] = x[i]
        return 0.0
    for i in range(n):
        out[i] = x[i] / norm
    return norm


def rowwise_sq_error(a, b, n, m, out):
    # out[i] = sum_j (a[i,j] - b[i,j])^2, j ascending.
    for i in range(n):
        row = i * m
        acc = 0.0
        for j in range(m):
            d = a[row + j] - b[row + j]
            acc += d * d
        out[i] = acc
