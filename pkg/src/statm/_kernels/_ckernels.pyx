# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the NumPy kernels in ``_npkernels``.

Same contracts: rowwise kernels take C-contiguous (rows, n) arrays and
reduce over the last axis with float64 accumulation; elementwise
kernels take any contiguous array. Results match the NumPy path to a
few ulps (the float64 accumulation order is identical; only libm
differences remain).
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log1p, sqrt, tanh as ctanh

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


def _as2d(arr):
    if arr.ndim != 2:
        raise ValueError("kernel expects a 2-D array")
    return np.ascontiguousarray(arr)


def softmax_fwd(x):
    x = _as2d(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _softmax_fwd[float](x, out)
    else:
        _softmax_fwd[double](x, out)
    return out


@cython.boundscheck(False)
cdef void _softmax_fwd(real[:, ::1] x, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m, d, e
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        d = 0.0
        for j in range(n):
            e = exp(<double> (x[i, j] - <real> m))
            out[i, j] = <real> e
            d += e
        for j in range(n):
            out[i, j] = <real> ((<double> out[i, j]) / d)


def softmax_bwd(y, g):
    y = _as2d(y)
    g = _as2d(g)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _softmax_bwd[float](y, g, out)
    else:
        _softmax_bwd[double](y, g, out)
    return out


cdef void _softmax_bwd(real[:, ::1] y, real[:, ::1] g, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double s
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += (<double> y[i, j]) * (<double> g[i, j])
        for j in range(n):
            out[i, j] = <real> ((<double> y[i, j]) * ((<double> g[i, j]) - s))


def layer_norm_fwd(x, gain, bias, double eps):
    x = _as2d(x)
    out = np.empty_like(x)
    mu = np.empty((x.shape[0], 1), dtype=np.float64)
    rstd = np.empty((x.shape[0], 1), dtype=np.float64)
    if x.dtype == np.float32:
        _layer_norm_fwd[float](x, gain, bias, eps, out, mu[:, 0], rstd[:, 0])
    else:
        _layer_norm_fwd[double](x, gain, bias, eps, out, mu[:, 0], rstd[:, 0])
    return out, mu, rstd


cdef void _layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias,
                          double eps, real[:, ::1] out, double[::1] mu,
                          double[::1] rstd) noexcept nogil:
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m, v, d, r
    for i in range(rows):
        m = 0.0
        for j in range(n):
            m += <double> x[i, j]
        m /= n
        v = 0.0
        for j in range(n):
            d = (<double> x[i, j]) - m
            v += d * d
        v /= n
        r = 1.0 / sqrt(v + eps)
        mu[i] = m
        rstd[i] = r
        for j in range(n):
            out[i, j] = <real> (((<double> x[i, j]) - m) * r * (<double> gain[j])
                                + (<double> bias[j]))


def layer_norm_bwd(x, gain, mu, rstd, g):
    x = _as2d(x)
    g = _as2d(g)
    gx = np.empty_like(x)
    ggain64 = np.zeros(x.shape[1], dtype=np.float64)
    gbias64 = np.zeros(x.shape[1], dtype=np.float64)
    if x.dtype == np.float32:
        _layer_norm_bwd[float](x, gain, mu[:, 0], rstd[:, 0], g, gx, ggain64, gbias64)
    else:
        _layer_norm_bwd[double](x, gain, mu[:, 0], rstd[:, 0], g, gx, ggain64, gbias64)
    return gx, ggain64.astype(x.dtype), gbias64.astype(x.dtype)


cdef void _layer_norm_bwd(real[:, ::1] x, real[::1] gain, double[::1] mu,
                          double[::1] rstd, real[:, ::1] g, real[:, ::1] gx,
                          double[::1] ggain, double[::1] gbias) noexcept nogil:
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m1, m2, xhat, dxhat, gd
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            xhat = ((<double> x[i, j]) - mu[i]) * rstd[i]
            gd = <double> g[i, j]
            dxhat = gd * (<double> gain[j])
            m1 += dxhat
            m2 += dxhat * xhat
            ggain[j] += gd * xhat
            gbias[j] += gd
        m1 /= n
        m2 /= n
        for j in range(n):
            xhat = ((<double> x[i, j]) - mu[i]) * rstd[i]
            dxhat = (<double> g[i, j]) * (<double> gain[j])
            gx[i, j] = <real> (rstd[i] * (dxhat - m1 - xhat * m2))


def relu_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    xf = x.reshape(-1)
    of = out.reshape(-1)
    if x.dtype == np.float32:
        _relu_fwd[float](xf, of)
    else:
        _relu_fwd[double](xf, of)
    return out


cdef void _relu_fwd(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = x[i] if x[i] > 0 else <real> 0


def relu_bwd(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _relu_bwd[float](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    else:
        _relu_bwd[double](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _relu_bwd(real[::1] y, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = y.shape[0]
    for i in range(n):
        out[i] = g[i] if y[i] > 0 else <real> 0


def sigmoid_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _sigmoid_fwd[float](x.reshape(-1), out.reshape(-1))
    else:
        _sigmoid_fwd[double](x.reshape(-1), out.reshape(-1))
    return out


cdef void _sigmoid_fwd(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, e
    for i in range(n):
        v = <double> x[i]
        if v >= 0:
            out[i] = <real> (1.0 / (1.0 + exp(-v)))
        else:
            e = exp(v)
            out[i] = <real> (e / (1.0 + e))


def sigmoid_bwd(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _sigmoid_bwd[float](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    else:
        _sigmoid_bwd[double](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _sigmoid_bwd(real[::1] y, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = y.shape[0]
    cdef double yv
    for i in range(n):
        yv = <double> y[i]
        out[i] = <real> ((<double> g[i]) * yv * (1.0 - yv))


def tanh_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _tanh_fwd[float](x.reshape(-1), out.reshape(-1))
    else:
        _tanh_fwd[double](x.reshape(-1), out.reshape(-1))
    return out


cdef void _tanh_fwd(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = <real> ctanh(<double> x[i])


def tanh_bwd(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _tanh_bwd[float](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    else:
        _tanh_bwd[double](y.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _tanh_bwd(real[::1] y, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = y.shape[0]
    cdef double yv
    for i in range(n):
        yv = <double> y[i]
        out[i] = <real> ((<double> g[i]) * (1.0 - yv * yv))


def softplus_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _softplus_fwd[float](x.reshape(-1), out.reshape(-1))
    else:
        _softplus_fwd[double](x.reshape(-1), out.reshape(-1))
    return out


cdef void _softplus_fwd(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = <double> x[i]
        out[i] = <real> (v if v > 30.0 else log1p(exp(v)))


def softplus_bwd(x, g):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _softplus_bwd[float](x.reshape(-1), g.reshape(-1), out.reshape(-1))
    else:
        _softplus_bwd[double](x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _softplus_bwd(real[::1] x, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, s, e
    for i in range(n):
        v = <double> x[i]
        if v >= 0:
            s = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            s = e / (1.0 + e)
        out[i] = <real> ((<double> g[i]) * s)
