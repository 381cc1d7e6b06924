# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 2-D convolution kernels (forward and backward).

Inputs arrive already zero-padded.  Each sample is processed in bands of
output rows: the band is unfolded into a small column matrix that stays in
cache and multiplied with BLAS ``dgemm``.  Samples are processed in batch
order and accumulations into the weight gradient happen in that same order,
so results are bitwise reproducible run to run.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

# Target number of output pixels per band (columns of the unfolded matrix).
cdef int BAND_PIXELS = 128


def set_band_pixels(int pixels):
    """Tune the band width; returns the previous value."""
    global BAND_PIXELS
    old = BAND_PIXELS
    BAND_PIXELS = max(1, pixels)
    return old


cdef inline void _gemm_rm(bint trans_a, bint trans_b, int m, int n, int k,
                          double alpha, double* a, int lda, double* b, int ldb,
                          double beta, double* c, int ldc) noexcept nogil:
    # Row-major C = op(A) op(B), expressed as column-major C^T = op(B)^T op(A)^T.
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _unfold_band(double[:, :, ::1] xp, int kh, int kw, int stride, int dilation,
                       int oh0, int rows, int wo, double[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t channels = xp.shape[0]
    cdef Py_ssize_t c, i, j, r, ow, row = 0
    cdef double* dst
    cdef double* src
    for c in range(channels):
        for i in range(kh):
            for j in range(kw):
                for r in range(rows):
                    dst = &cols[row, r * wo]
                    src = &xp[c, (oh0 + r) * stride + i * dilation, j * dilation]
                    if stride == 1:
                        for ow in range(wo):
                            dst[ow] = src[ow]
                    else:
                        for ow in range(wo):
                            dst[ow] = src[ow * stride]
                row += 1


cdef void _fold_band(double[:, ::1] cols, int kh, int kw, int stride, int dilation,
                     int oh0, int rows, int wo, double[:, :, ::1] dxp) noexcept nogil:
    cdef Py_ssize_t channels = dxp.shape[0]
    cdef Py_ssize_t c, i, j, r, ow, row = 0
    cdef double* dst
    cdef double* src
    for c in range(channels):
        for i in range(kh):
            for j in range(kw):
                for r in range(rows):
                    src = &cols[row, r * wo]
                    dst = &dxp[c, (oh0 + r) * stride + i * dilation, j * dilation]
                    if stride == 1:
                        for ow in range(wo):
                            dst[ow] += src[ow]
                    else:
                        for ow in range(wo):
                            dst[ow * stride] += src[ow]
                row += 1


cdef bint _all_zero(double[:, :, ::1] g) noexcept nogil:
    cdef Py_ssize_t k, r, c
    for k in range(g.shape[0]):
        for r in range(g.shape[1]):
            for c in range(g.shape[2]):
                if g[k, r, c] != 0.0:
                    return False
    return True


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] weight,
                   double[::1] bias, int stride, int dilation, int ho, int wo, bint relu=False):
    cdef int n_batch = xp.shape[0], channels = xp.shape[1]
    cdef int k_out = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3]
    cdef int ckk = channels * kh * kw
    cdef int band = max(1, BAND_PIXELS // wo)
    out_arr = np.empty((n_batch, k_out, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = np.empty((ckk, band * wo))
    cdef int n, k, p, oh0, rows
    cdef double* seg
    with nogil:
        for n in range(n_batch):
            for k in range(k_out):
                for oh0 in range(ho):
                    for p in range(wo):
                        out[n, k, oh0, p] = bias[k]
            oh0 = 0
            while oh0 < ho:
                rows = min(band, ho - oh0)
                _unfold_band(xp[n], kh, kw, stride, dilation, oh0, rows, wo, cols)
                _gemm_rm(False, False, k_out, rows * wo, ckk, 1.0,
                         &weight[0, 0, 0, 0], ckk, &cols[0, 0], band * wo,
                         1.0, &out[n, 0, oh0, 0], ho * wo)
                if relu:
                    # rectify while the band is still in cache
                    for k in range(k_out):
                        seg = &out[n, k, oh0, 0]
                        for p in range(rows * wo):
                            if not seg[p] > 0.0:
                                seg[p] = 0.0
                oh0 += rows
    return out_arr


def conv2d_backward(double[:, :, :, ::1] xp, double[:, :, :, ::1] weight,
                    double[:, :, :, ::1] gout, int stride, int dilation, bint need_dx,
                    double[:, :, :, ::1] out=None):
    """Gradients of the convolution; with ``out`` (a rectified forward output)
    the upstream gradient is first masked to where ``out > 0``."""
    cdef int n_batch = xp.shape[0], channels = xp.shape[1]
    cdef int k_out = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3]
    cdef int ho = gout.shape[2], wo = gout.shape[3]
    cdef int ckk = channels * kh * kw
    cdef int band = max(1, BAND_PIXELS // wo)
    cdef bint masked = out is not None
    dw_arr = np.zeros((k_out, channels, kh, kw))
    db_arr = np.zeros(k_out)
    dxp_arr = np.zeros((n_batch, channels, xp.shape[2], xp.shape[3])) if need_dx else None
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, :, :, ::1] dxp
    if need_dx:
        dxp = dxp_arr
    cdef double[:, ::1] cols = np.empty((ckk, band * wo))
    cdef double[:, ::1] dcols = np.empty((ckk, band * wo))
    cdef double[:, :, ::1] gm = np.empty((k_out, ho, wo))
    cdef double[:, :, ::1] g
    cdef int n, k, r, c, oh0, rows
    cdef double acc
    with nogil:
        for n in range(n_batch):
            if masked:
                for k in range(k_out):
                    for r in range(ho):
                        for c in range(wo):
                            gm[k, r, c] = gout[n, k, r, c] if out[n, k, r, c] > 0.0 else 0.0
                g = gm
            else:
                g = gout[n]
            # Samples with no upstream gradient contribute exact zeros; skip them.
            if _all_zero(g):
                continue
            for k in range(k_out):
                acc = 0.0
                for r in range(ho):
                    for c in range(wo):
                        acc = acc + g[k, r, c]
                db[k] += acc
            oh0 = 0
            while oh0 < ho:
                rows = min(band, ho - oh0)
                _unfold_band(xp[n], kh, kw, stride, dilation, oh0, rows, wo, cols)
                _gemm_rm(False, True, k_out, ckk, rows * wo, 1.0,
                         &g[0, oh0, 0], ho * wo, &cols[0, 0], band * wo,
                         1.0, &dw[0, 0, 0, 0], ckk)
                if need_dx:
                    _gemm_rm(True, False, ckk, rows * wo, k_out, 1.0,
                             &weight[0, 0, 0, 0], ckk, &g[0, oh0, 0], ho * wo,
                             0.0, &dcols[0, 0], band * wo)
                    _fold_band(dcols, kh, kw, stride, dilation, oh0, rows, wo, dxp[n])
                oh0 += rows
    return dxp_arr, dw_arr, db_arr


def avgpool2_forward(double[:, :, :, ::1] x):
    """Non-overlapping 2x2 means; same summation order as the numpy fallback."""
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    out_arr = np.empty((n_batch, channels, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, r, q
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for r in range(h):
                    for q in range(w):
                        out[n, c, r, q] = (x[n, c, 2 * r, 2 * q] + x[n, c, 2 * r, 2 * q + 1]
                                           + x[n, c, 2 * r + 1, 2 * q] + x[n, c, 2 * r + 1, 2 * q + 1]) * 0.25
    return out_arr


def avgpool2_backward(double[:, :, :, ::1] g):
    cdef Py_ssize_t n_batch = g.shape[0], channels = g.shape[1], h = g.shape[2], w = g.shape[3]
    out_arr = np.empty((n_batch, channels, 2 * h, 2 * w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, r, q
    cdef double v
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for r in range(h):
                    for q in range(w):
                        v = g[n, c, r, q] * 0.25
                        out[n, c, 2 * r, 2 * q] = v
                        out[n, c, 2 * r, 2 * q + 1] = v
                        out[n, c, 2 * r + 1, 2 * q] = v
                        out[n, c, 2 * r + 1, 2 * q + 1] = v
    return out_arr
