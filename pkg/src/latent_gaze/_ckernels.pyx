# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``."""

from libc.math cimport floor, sqrt, exp, tanh
from scipy.linalg.cython_blas cimport sgemv

import numpy as np

ctypedef fused src_t:
    unsigned char
    float


def warp_into(src_t[:, :, ::1] src, double[:, ::1] params, double gain,
              float[:, :, ::1] out):
    cdef Py_ssize_t B = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t S = out.shape[1]
    cdef double co = (S - 1) / 2.0
    cdef double cr = (H - 1) / 2.0
    cdef double cc = (W - 1) / 2.0
    cdef double rad2 = (S / 2.0) * (S / 2.0)
    cdef Py_ssize_t i, r, c, sr
    cdef double ty, tx, s, dr, dc
    cdef Py_ssize_t[::1] cols = np.empty(S, dtype=np.intp)
    cdef Py_ssize_t[::1] c_lo = np.empty(S, dtype=np.intp)
    cdef Py_ssize_t[::1] c_hi = np.empty(S, dtype=np.intp)
    cdef float fgain = <float>gain
    cdef bint exact_gain = <double>fgain == gain
    # circle extent per output row, computed with the same arithmetic as the mask
    for r in range(S):
        dr = r - co
        c_lo[r] = S
        c_hi[r] = 0
        for c in range(S):
            dc = c - co
            if dr * dr + dc * dc <= rad2:
                if c < c_lo[r]:
                    c_lo[r] = c
                c_hi[r] = c + 1
    with nogil:
        for i in range(B):
            ty = params[i, 0]
            tx = params[i, 1]
            s = params[i, 2]
            for c in range(S):
                dc = c - co
                if params[i, 3] != 0:
                    cols[c] = <Py_ssize_t>floor(cc + tx + (-dc) / s + 0.5)
                else:
                    cols[c] = <Py_ssize_t>floor(cc + tx + dc / s + 0.5)
            for r in range(S):
                dr = r - co
                sr = <Py_ssize_t>floor(cr + ty + dr / s + 0.5)
                if sr < 0 or sr >= H:
                    for c in range(S):
                        out[i, r, c] = 0
                    continue
                for c in range(c_lo[r]):
                    out[i, r, c] = 0
                for c in range(c_hi[r], S):
                    out[i, r, c] = 0
                for c in range(c_lo[r], c_hi[r]):
                    if cols[c] < 0 or cols[c] >= W:
                        out[i, r, c] = 0
                    elif exact_gain:
                        out[i, r, c] = <float>src[i, sr, cols[c]] * fgain
                    else:
                        out[i, r, c] = <float>(<double>src[i, sr, cols[c]] * gain)
    return np.asarray(out)


cdef inline void _matvec(float[:, ::1] Wm, float* x, float* y) noexcept nogil:
    # y = Wm @ x for row-major Wm (m x n): column-major view is n x m, so transpose
    cdef int m = <int>Wm.shape[0]
    cdef int n = <int>Wm.shape[1]
    cdef int inc = 1
    cdef float alpha = 1.0, beta = 0.0
    cdef char trans = b'T'
    sgemv(&trans, &n, &m, &alpha, &Wm[0, 0], &n, x, &inc, &beta, y, &inc)


cdef inline void _bias_act(float* x, float[::1] b, int n, int act) noexcept nogil:
    cdef int i
    cdef float v
    for i in range(n):
        v = x[i] + b[i]
        if act == 0:
            x[i] = v if v > 0 else 0
        else:
            x[i] = 0.5 * v * (1.0 + tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)))


cdef inline void _layer_norm(float* x, float* out, float[::1] scale, float[::1] shift,
                             int n, float eps) noexcept nogil:
    cdef int i
    cdef double m = 0, var = 0, d
    for i in range(n):
        m += x[i]
    m /= n
    for i in range(n):
        d = x[i] - m
        var += d * d
    var /= n
    cdef double inv = 1.0 / sqrt(var + eps)
    for i in range(n):
        out[i] = <float>((x[i] - m) * inv) * scale[i] + shift[i]


cdef class InferenceEngine:
    cdef object packed
    cdef float[::1] mean, inv_std, in_scale, in_shift, b_up, b_up2, res_scale, res_shift
    cdef float[::1] b_r1, b_r2, b_pre, b_g, b_v
    cdef float[:, ::1] W_up, W_up2, W_r1, W_r2, W_pre, W_g, W_v
    cdef float[::1] z, a, r, t, h, g
    cdef int act, n_in, width
    cdef float eps

    def __init__(self, packed):
        self.packed = packed
        self.mean = packed.mean
        self.inv_std = packed.inv_std
        self.in_scale = packed.in_scale
        self.in_shift = packed.in_shift
        self.W_up = packed.W_up
        self.b_up = packed.b_up
        self.W_up2 = packed.W_up2
        self.b_up2 = packed.b_up2
        self.res_scale = packed.res_scale
        self.res_shift = packed.res_shift
        self.W_r1 = packed.W_r1
        self.b_r1 = packed.b_r1
        self.W_r2 = packed.W_r2
        self.b_r2 = packed.b_r2
        self.W_pre = packed.W_pre
        self.b_pre = packed.b_pre
        self.W_g = packed.W_g
        self.b_g = packed.b_g
        self.W_v = packed.W_v
        self.b_v = packed.b_v
        self.act = packed.activation
        self.eps = packed.eps
        self.n_in = self.W_up.shape[1]
        self.width = self.W_up.shape[0]
        self.z = np.empty(self.n_in, np.float32)
        self.a = np.empty(self.width, np.float32)
        self.r = np.empty(self.width, np.float32)
        self.t = np.empty(self.width, np.float32)
        self.h = np.empty(self.width, np.float32)
        self.g = np.empty(3, np.float32)

    def infer(self, float[::1] y, gaze_out=None):
        cdef float[::1] go
        if gaze_out is None:
            gaze_out = np.empty(3, np.float32)
        go = gaze_out
        cdef double logit, nrm
        cdef int i, w = self.width
        cdef float[::1] vout = np.empty(1, np.float32)
        with nogil:
            for i in range(self.n_in):
                self.t[i] = (y[i] - self.mean[i]) * self.inv_std[i]
            _layer_norm(&self.t[0], &self.z[0], self.in_scale, self.in_shift, self.n_in, self.eps)
            _matvec(self.W_up, &self.z[0], &self.t[0])
            _bias_act(&self.t[0], self.b_up, w, self.act)
            _matvec(self.W_up2, &self.t[0], &self.a[0])
            _bias_act(&self.a[0], self.b_up2, w, self.act)
            _layer_norm(&self.a[0], &self.r[0], self.res_scale, self.res_shift, w, self.eps)
            _matvec(self.W_r1, &self.r[0], &self.t[0])
            _bias_act(&self.t[0], self.b_r1, w, self.act)
            _matvec(self.W_r2, &self.t[0], &self.r[0])
            for i in range(w):
                self.a[i] = self.a[i] + (self.r[i] + self.b_r2[i])
            _matvec(self.W_pre, &self.a[0], &self.h[0])
            _bias_act(&self.h[0], self.b_pre, w, self.act)
            _matvec(self.W_g, &self.h[0], &self.g[0])
            _matvec(self.W_v, &self.h[0], &vout[0])
            nrm = 0
            for i in range(3):
                self.g[i] = self.g[i] + self.b_g[i]
                nrm += self.g[i] * self.g[i]
            nrm = sqrt(nrm)
            for i in range(3):
                go[i] = <float>(self.g[i] / nrm) if nrm > 0 else 0
            logit = vout[0] + self.b_v[0]
        if logit >= 0:
            return 1.0 / (1.0 + exp(-logit))
        return exp(logit) / (1.0 + exp(logit))
