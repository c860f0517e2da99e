# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_pykernels`` function for function."""

import numpy as np

from libc.math cimport exp, sqrt, tanh, INFINITY

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline const unsigned char[:, ::1] _as_mask(mask, Py_ssize_t n, Py_ssize_t m):
    cdef const unsigned char[:, ::1] mv
    if mask is None:
        return np.ones((n, m), dtype=np.uint8)
    mv = np.ascontiguousarray(mask, dtype=np.uint8)
    if mv.shape[0] != n or mv.shape[1] != m:
        raise ValueError(f"mask shape {(mv.shape[0], mv.shape[1])} does not match scores {(n, m)}")
    return mv


cdef void _check_rows(const unsigned char[:, ::1] mask) except *:
    cdef Py_ssize_t i, j
    cdef bint any_key
    bad = []
    for i in range(mask.shape[0]):
        any_key = False
        for j in range(mask.shape[1]):
            if mask[i, j]:
                any_key = True
                break
        if not any_key:
            bad.append(i)
    if bad:
        raise ValueError(f"attention mask leaves query rows {bad} with no keys")


cdef void _softmax_row(double* s, const unsigned char* mk, Py_ssize_t m) noexcept nogil:
    # in place; masked entries become exactly 0
    cdef Py_ssize_t j
    cdef double mx = -INFINITY
    cdef double tot = 0.0
    for j in range(m):
        if mk[j] and s[j] > mx:
            mx = s[j]
    for j in range(m):
        if mk[j]:
            s[j] = exp(s[j] - mx)
            tot += s[j]
        else:
            s[j] = 0.0
    for j in range(m):
        s[j] = s[j] / tot


def softmax_rows(x, mask=None):
    cdef double[:, ::1] y = np.array(x, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i
    cdef const unsigned char[:, ::1] mk = _as_mask(mask, n, m)
    if mask is not None:
        _check_rows(mk)
    with nogil:
        for i in range(n):
            _softmax_row(&y[i, 0], &mk[i, 0], m)
    return np.asarray(y)


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot = dot + gy[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def attention_forward(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
                      mask, int heads, double scale):
    cdef Py_ssize_t n = q.shape[0], d = q.shape[1], m = k.shape[0]
    cdef Py_ssize_t dh = d // heads
    cdef Py_ssize_t h, i, j, c, c0
    cdef double acc
    cdef const unsigned char[:, ::1] mk = _as_mask(mask, n, m)
    _check_rows(mk)
    out_arr = np.zeros((n, d))
    w_arr = np.empty((heads, n, m))
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    with nogil:
        for h in range(heads):
            c0 = h * dh
            for i in range(n):
                for j in range(m):
                    if mk[i, j]:
                        acc = 0.0
                        for c in range(dh):
                            acc = acc + q[i, c0 + c] * k[j, c0 + c]
                        w[h, i, j] = acc * scale
                _softmax_row(&w[h, i, 0], &mk[i, 0], m)
                for j in range(m):
                    if w[h, i, j] != 0.0:
                        for c in range(dh):
                            out[i, c0 + c] += w[h, i, j] * v[j, c0 + c]
    return out_arr, w_arr


def attention_backward(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
                       const double[:, :, ::1] weights, const double[:, ::1] gout,
                       int heads, double scale):
    cdef Py_ssize_t n = q.shape[0], d = q.shape[1], m = k.shape[0]
    cdef Py_ssize_t dh = d // heads
    cdef Py_ssize_t h, i, j, c, c0
    cdef double acc, dot, wij, gs
    gq_arr = np.zeros((n, d))
    gk_arr = np.zeros((m, d))
    gv_arr = np.zeros((m, d))
    gw_arr = np.empty(m)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gk = gk_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double[::1] gw = gw_arr
    with nogil:
        for h in range(heads):
            c0 = h * dh
            for i in range(n):
                dot = 0.0
                for j in range(m):
                    wij = weights[h, i, j]
                    if wij == 0.0:
                        gw[j] = 0.0
                        continue
                    acc = 0.0
                    for c in range(dh):
                        acc = acc + gout[i, c0 + c] * v[j, c0 + c]
                        gv[j, c0 + c] += wij * gout[i, c0 + c]
                    gw[j] = acc
                    dot = dot + wij * acc
                for j in range(m):
                    wij = weights[h, i, j]
                    if wij == 0.0:
                        continue
                    gs = wij * (gw[j] - dot) * scale
                    for c in range(dh):
                        gq[i, c0 + c] += gs * k[j, c0 + c]
                        gk[j, c0 + c] += gs * q[i, c0 + c]
    return gq_arr, gk_arr, gv_arr


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias,
                       double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, c
    cdef double mu, var, s, dv
    y_arr = np.empty((n, d))
    xh_arr = np.empty((n, d))
    inv_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xh = xh_arr
    cdef double[::1] inv = inv_arr
    with nogil:
        for i in range(n):
            mu = 0.0
            for c in range(d):
                mu = mu + x[i, c]
            mu = mu / d
            var = 0.0
            for c in range(d):
                dv = x[i, c] - mu
                var = var + dv * dv
            s = 1.0 / sqrt(var / d + eps)
            inv[i] = s
            for c in range(d):
                xh[i, c] = (x[i, c] - mu) * s
                y[i, c] = xh[i, c] * gain[c] + bias[c]
    return y_arr, xh_arr, inv_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] inv_std, const double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, c
    cdef double sg, sgx, gxh
    gx_arr = np.empty((n, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for i in range(n):
            sg = 0.0
            sgx = 0.0
            for c in range(d):
                gxh = gy[i, c] * gain[c]
                sg = sg + gxh
                sgx = sgx + gxh * xhat[i, c]
                gg[c] += gy[i, c] * xhat[i, c]
                gb[c] += gy[i, c]
            for c in range(d):
                gxh = gy[i, c] * gain[c]
                gx[i, c] = (inv_std[i] / d) * (d * gxh - sg - xhat[i, c] * sgx)
    return gx_arr, gg_arr, gb_arr


def gelu_forward(x):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(xv.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double t
    with nogil:
        for i in range(xv.shape[0]):
            t = tanh(GELU_C * (xv[i] + GELU_A * xv[i] * xv[i] * xv[i]))
            o[i] = 0.5 * xv[i] * (1.0 + t)
    return out.reshape(np.shape(x))


def gelu_backward(x, gy):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1)
    out = np.empty(xv.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double t, dt, xi
    with nogil:
        for i in range(xv.shape[0]):
            xi = xv[i]
            t = tanh(GELU_C * (xi + GELU_A * xi * xi * xi))
            dt = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi) * (1.0 - t * t)
            o[i] = gv[i] * (0.5 * (1.0 + t) + 0.5 * xi * dt)
    return out.reshape(np.shape(x))


def lcs_length(a, b):
    cdef const long long[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef const long long[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t na = av.shape[0], nb = bv.shape[0], i, j
    if na == 0 or nb == 0:
        return 0
    rows_arr = np.zeros((2, nb + 1), dtype=np.int64)
    cdef long long[:, ::1] rows = rows_arr
    cdef Py_ssize_t p = 0, q = 1
    with nogil:
        for i in range(na):
            rows[q, 0] = 0
            for j in range(1, nb + 1):
                if av[i] == bv[j - 1]:
                    rows[q, j] = rows[p, j - 1] + 1
                elif rows[p, j] >= rows[q, j - 1]:
                    rows[q, j] = rows[p, j]
                else:
                    rows[q, j] = rows[q, j - 1]
            p, q = q, p
    return int(rows[p, nb])
