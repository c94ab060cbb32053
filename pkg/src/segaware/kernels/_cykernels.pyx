# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution core.

Hot kernels for 3x3 same-padding convolution (forward, weight gradient)
plus the ReLU backward mask. Activations are NHWC, weights are
(3, 3, c_in, c_out). float32 paths use hand-tuned AVX-512 micro-kernels
when the compiler target supports them, with a portable-C fallback;
float64 paths (used by the finite-difference oracles) are portable C.

Input gradients are not implemented here: the dispatch layer expresses
them as a forward convolution of the (dilated) output gradient with
flipped/transposed weights, which reuses the fast forward kernel.

Threading: prange over the batch with a static schedule, so results are
deterministic for a fixed OMP thread count.
"""
import numpy as np

cimport cython
cimport openmp
from cython.parallel cimport prange

cdef extern from *:
    """
    #include <string.h>

    #if defined(__AVX512F__)
    #include <immintrin.h>

    /* y[j*O+o] += sum_c x[(j*s+dj)*C+c] * w9[c*O+o], j in [j0,j1).
       Register-blocked: 4 output pixels x up to 32 lanes. */
    static void conv_row_f32(const float* restrict xrow, const float* restrict w9,
                             float* restrict yrow, long j0, long j1,
                             long stride, long dj, long C, long O)
    {
        long j = j0;
        const long step = stride * C;
        for (; j + 4 <= j1; j += 4) {
            const float* x0 = xrow + (j * stride + dj) * C;
            const float* x1 = x0 + step;
            const float* x2 = x1 + step;
            const float* x3 = x2 + step;
            float* y0 = yrow + j * O;
            long ob = 0;
            for (; ob + 32 <= O; ob += 32) {
                float* p0 = y0 + ob;
                float* p1 = p0 + O;
                float* p2 = p1 + O;
                float* p3 = p2 + O;
                __m512 a00 = _mm512_loadu_ps(p0), a01 = _mm512_loadu_ps(p0 + 16);
                __m512 a10 = _mm512_loadu_ps(p1), a11 = _mm512_loadu_ps(p1 + 16);
                __m512 a20 = _mm512_loadu_ps(p2), a21 = _mm512_loadu_ps(p2 + 16);
                __m512 a30 = _mm512_loadu_ps(p3), a31 = _mm512_loadu_ps(p3 + 16);
                const float* wp = w9 + ob;
                for (long c = 0; c < C; ++c, wp += O) {
                    const __m512 w0 = _mm512_loadu_ps(wp);
                    const __m512 w1 = _mm512_loadu_ps(wp + 16);
                    __m512 v;
                    v = _mm512_set1_ps(x0[c]);
                    a00 = _mm512_fmadd_ps(v, w0, a00);
                    a01 = _mm512_fmadd_ps(v, w1, a01);
                    v = _mm512_set1_ps(x1[c]);
                    a10 = _mm512_fmadd_ps(v, w0, a10);
                    a11 = _mm512_fmadd_ps(v, w1, a11);
                    v = _mm512_set1_ps(x2[c]);
                    a20 = _mm512_fmadd_ps(v, w0, a20);
                    a21 = _mm512_fmadd_ps(v, w1, a21);
                    v = _mm512_set1_ps(x3[c]);
                    a30 = _mm512_fmadd_ps(v, w0, a30);
                    a31 = _mm512_fmadd_ps(v, w1, a31);
                }
                _mm512_storeu_ps(p0, a00); _mm512_storeu_ps(p0 + 16, a01);
                _mm512_storeu_ps(p1, a10); _mm512_storeu_ps(p1 + 16, a11);
                _mm512_storeu_ps(p2, a20); _mm512_storeu_ps(p2 + 16, a21);
                _mm512_storeu_ps(p3, a30); _mm512_storeu_ps(p3 + 16, a31);
            }
            for (; ob + 16 <= O; ob += 16) {
                float* p0 = y0 + ob;
                __m512 a0 = _mm512_loadu_ps(p0);
                __m512 a1 = _mm512_loadu_ps(p0 + O);
                __m512 a2 = _mm512_loadu_ps(p0 + 2 * O);
                __m512 a3 = _mm512_loadu_ps(p0 + 3 * O);
                const float* wp = w9 + ob;
                for (long c = 0; c < C; ++c, wp += O) {
                    const __m512 w0 = _mm512_loadu_ps(wp);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(x0[c]), w0, a0);
                    a1 = _mm512_fmadd_ps(_mm512_set1_ps(x1[c]), w0, a1);
                    a2 = _mm512_fmadd_ps(_mm512_set1_ps(x2[c]), w0, a2);
                    a3 = _mm512_fmadd_ps(_mm512_set1_ps(x3[c]), w0, a3);
                }
                _mm512_storeu_ps(p0, a0);
                _mm512_storeu_ps(p0 + O, a1);
                _mm512_storeu_ps(p0 + 2 * O, a2);
                _mm512_storeu_ps(p0 + 3 * O, a3);
            }
            for (; ob < O; ++ob) {
                float s0 = y0[ob], s1 = y0[O + ob], s2 = y0[2 * O + ob], s3 = y0[3 * O + ob];
                for (long c = 0; c < C; ++c) {
                    const float wv = w9[c * O + ob];
                    s0 += x0[c] * wv; s1 += x1[c] * wv;
                    s2 += x2[c] * wv; s3 += x3[c] * wv;
                }
                y0[ob] = s0; y0[O + ob] = s1; y0[2 * O + ob] = s2; y0[3 * O + ob] = s3;
            }
        }
        for (; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            float* y0 = yrow + j * O;
            long ob = 0;
            for (; ob + 16 <= O; ob += 16) {
                __m512 a0 = _mm512_loadu_ps(y0 + ob);
                const float* wp = w9 + ob;
                for (long c = 0; c < C; ++c, wp += O)
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(x0[c]), _mm512_loadu_ps(wp), a0);
                _mm512_storeu_ps(y0 + ob, a0);
            }
            for (; ob < O; ++ob) {
                float s0 = y0[ob];
                for (long c = 0; c < C; ++c) s0 += x0[c] * w9[c * O + ob];
                y0[ob] = s0;
            }
        }
    }

    /* Few output channels (O < 16): per-channel dot products over C.
       wt9 holds the transposed tap, laid out (O, C). */
    static void conv_row_smallo_f32(const float* restrict xrow, const float* restrict wt9,
                                    float* restrict yrow, long j0, long j1,
                                    long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            float* y0 = yrow + j * O;
            for (long o = 0; o < O; ++o) {
                const float* wr = wt9 + o * C;
                __m512 acc = _mm512_setzero_ps();
                long c = 0;
                for (; c + 16 <= C; c += 16)
                    acc = _mm512_fmadd_ps(_mm512_loadu_ps(x0 + c),
                                          _mm512_loadu_ps(wr + c), acc);
                float s = _mm512_reduce_add_ps(acc);
                for (; c < C; ++c) s += x0[c] * wr[c];
                y0[o] += s;
            }
        }
    }

    /* dw[c*O+o] += sum_j x[(j*s+dj)*C+c] * dy[j*O+o]; 4-pixel blocking. */
    static void gw_row_f32(const float* restrict xrow, const float* restrict dyrow,
                           float* restrict dwtile, long j0, long j1,
                           long stride, long dj, long C, long O)
    {
        long j = j0;
        const long step = stride * C;
        for (; j + 4 <= j1; j += 4) {
            const float* x0 = xrow + (j * stride + dj) * C;
            const float* x1 = x0 + step;
            const float* x2 = x1 + step;
            const float* x3 = x2 + step;
            const float* d0 = dyrow + j * O;
            long ob = 0;
            for (; ob + 16 <= O; ob += 16) {
                const __m512 v0 = _mm512_loadu_ps(d0 + ob);
                const __m512 v1 = _mm512_loadu_ps(d0 + O + ob);
                const __m512 v2 = _mm512_loadu_ps(d0 + 2 * O + ob);
                const __m512 v3 = _mm512_loadu_ps(d0 + 3 * O + ob);
                float* dw = dwtile + ob;
                for (long c = 0; c < C; ++c, dw += O) {
                    __m512 a = _mm512_loadu_ps(dw);
                    a = _mm512_fmadd_ps(_mm512_set1_ps(x0[c]), v0, a);
                    a = _mm512_fmadd_ps(_mm512_set1_ps(x1[c]), v1, a);
                    a = _mm512_fmadd_ps(_mm512_set1_ps(x2[c]), v2, a);
                    a = _mm512_fmadd_ps(_mm512_set1_ps(x3[c]), v3, a);
                    _mm512_storeu_ps(dw, a);
                }
            }
            for (; ob < O; ++ob) {
                const float v0 = d0[ob], v1 = d0[O + ob];
                const float v2 = d0[2 * O + ob], v3 = d0[3 * O + ob];
                for (long c = 0; c < C; ++c)
                    dwtile[c * O + ob] += x0[c] * v0 + x1[c] * v1 + x2[c] * v2 + x3[c] * v3;
            }
        }
        for (; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            const float* d0 = dyrow + j * O;
            long ob = 0;
            for (; ob + 16 <= O; ob += 16) {
                const __m512 v0 = _mm512_loadu_ps(d0 + ob);
                float* dw = dwtile + ob;
                for (long c = 0; c < C; ++c, dw += O)
                    _mm512_storeu_ps(dw, _mm512_fmadd_ps(_mm512_set1_ps(x0[c]), v0,
                                                         _mm512_loadu_ps(dw)));
            }
            for (; ob < O; ++ob) {
                const float v0 = d0[ob];
                for (long c = 0; c < C; ++c) dwtile[c * O + ob] += x0[c] * v0;
            }
        }
    }

    #else  /* portable float32 kernels */

    static void conv_row_f32(const float* restrict xrow, const float* restrict w9,
                             float* restrict yrow, long j0, long j1,
                             long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            float* y0 = yrow + j * O;
            long ob = 0;
            for (; ob + 16 <= O; ob += 16) {
                float a0[16];
                #pragma omp simd
                for (int u = 0; u < 16; ++u) a0[u] = y0[ob + u];
                for (long c = 0; c < C; ++c) {
                    const float xv = x0[c];
                    const float* wr = w9 + c * O + ob;
                    #pragma omp simd
                    for (int u = 0; u < 16; ++u) a0[u] += xv * wr[u];
                }
                #pragma omp simd
                for (int u = 0; u < 16; ++u) y0[ob + u] = a0[u];
            }
            for (; ob < O; ++ob) {
                float s0 = y0[ob];
                for (long c = 0; c < C; ++c) s0 += x0[c] * w9[c * O + ob];
                y0[ob] = s0;
            }
        }
    }

    static void conv_row_smallo_f32(const float* restrict xrow, const float* restrict wt9,
                                    float* restrict yrow, long j0, long j1,
                                    long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            float* y0 = yrow + j * O;
            for (long o = 0; o < O; ++o) {
                const float* wr = wt9 + o * C;
                float s = 0.f;
                #pragma omp simd reduction(+:s)
                for (long c = 0; c < C; ++c) s += x0[c] * wr[c];
                y0[o] += s;
            }
        }
    }

    static void gw_row_f32(const float* restrict xrow, const float* restrict dyrow,
                           float* restrict dwtile, long j0, long j1,
                           long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const float* x0 = xrow + (j * stride + dj) * C;
            const float* d0 = dyrow + j * O;
            for (long c = 0; c < C; ++c) {
                const float xv = x0[c];
                float* dw = dwtile + c * O;
                #pragma omp simd
                for (long o = 0; o < O; ++o) dw[o] += xv * d0[o];
            }
        }
    }
    #endif

    /* float64 kernels, portable (oracle paths only, tiny problem sizes) */
    static void conv_row_f64(const double* restrict xrow, const double* restrict w9,
                             double* restrict yrow, long j0, long j1,
                             long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const double* x0 = xrow + (j * stride + dj) * C;
            double* y0 = yrow + j * O;
            for (long c = 0; c < C; ++c) {
                const double xv = x0[c];
                const double* wr = w9 + c * O;
                #pragma omp simd
                for (long o = 0; o < O; ++o) y0[o] += xv * wr[o];
            }
        }
    }

    static void gw_row_f64(const double* restrict xrow, const double* restrict dyrow,
                           double* restrict dwtile, long j0, long j1,
                           long stride, long dj, long C, long O)
    {
        for (long j = j0; j < j1; ++j) {
            const double* x0 = xrow + (j * stride + dj) * C;
            const double* d0 = dyrow + j * O;
            for (long c = 0; c < C; ++c) {
                const double xv = x0[c];
                double* dw = dwtile + c * O;
                #pragma omp simd
                for (long o = 0; o < O; ++o) dw[o] += xv * d0[o];
            }
        }
    }
    """
    void conv_row_f32(const float* xrow, const float* w9, float* yrow,
                      long j0, long j1, long stride, long dj, long C, long O) nogil
    void conv_row_smallo_f32(const float* xrow, const float* wt9, float* yrow,
                             long j0, long j1, long stride, long dj, long C, long O) nogil
    void gw_row_f32(const float* xrow, const float* dyrow, float* dwtile,
                    long j0, long j1, long stride, long dj, long C, long O) nogil
    void conv_row_f64(const double* xrow, const double* w9, double* yrow,
                      long j0, long j1, long stride, long dj, long C, long O) nogil
    void gw_row_f64(const double* xrow, const double* dyrow, double* dwtile,
                    long j0, long j1, long stride, long dj, long C, long O) nogil

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid_j(Py_ssize_t stride, Py_ssize_t dj) noexcept nogil:
    cdef Py_ssize_t j0 = 0
    while j0 * stride + dj < 0:
        j0 += 1
    return j0


cdef inline Py_ssize_t _last_valid_j(Py_ssize_t stride, Py_ssize_t dj,
                                     Py_ssize_t Wo, Py_ssize_t W,
                                     Py_ssize_t j0) noexcept nogil:
    cdef Py_ssize_t j1 = Wo
    while j1 > j0 and (j1 - 1) * stride + dj > W - 1:
        j1 -= 1
    return j1


def conv3x3_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] wt, real[::1] b,
                    real[:, :, :, ::1] y, int stride, bint relu):
    """Same-padding 3x3 convolution. wt is the (3,3,O,C) transpose of w,
    used only by the small-O float32 path (pass w-as-is when O >= 16)."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t O = w.shape[3], Ho = y.shape[1], Wo = y.shape[2]
    cdef Py_ssize_t bi, i, j, kh, kw, o, r, j0, j1, dj
    cdef bint small_o = (real is float) and O < 16 and C >= 16
    cdef const real* xp0 = &x[0, 0, 0, 0]
    cdef const real* wp0 = &w[0, 0, 0, 0]
    cdef const real* wtp0 = &wt[0, 0, 0, 0]
    cdef const real* bp = &b[0]
    cdef real* yp0 = &y[0, 0, 0, 0]
    cdef real* yrow
    if B == 0:
        return
    for bi in prange(B, nogil=True, schedule='static'):
        for i in range(Ho):
            yrow = yp0 + ((bi * Ho + i) * Wo) * O
            for j in range(Wo):
                for o in range(O):
                    yrow[j * O + o] = bp[o]
            for kh in range(3):
                r = i * stride + kh - 1
                if r < 0 or r >= H:
                    continue
                for kw in range(3):
                    dj = kw - 1
                    j0 = _first_valid_j(stride, dj)
                    j1 = _last_valid_j(stride, dj, Wo, W, j0)
                    if j1 <= j0:
                        continue
                    if real is float:
                        if small_o:
                            conv_row_smallo_f32(<const float*> xp0 + ((bi * H + r) * W) * C,
                                                <const float*> wtp0 + (kh * 3 + kw) * O * C,
                                                <float*> yrow, j0, j1, stride, dj, C, O)
                        else:
                            conv_row_f32(<const float*> xp0 + ((bi * H + r) * W) * C,
                                         <const float*> wp0 + (kh * 3 + kw) * C * O,
                                         <float*> yrow, j0, j1, stride, dj, C, O)
                    else:
                        conv_row_f64(<const double*> xp0 + ((bi * H + r) * W) * C,
                                     <const double*> wp0 + (kh * 3 + kw) * C * O,
                                     <double*> yrow, j0, j1, stride, dj, C, O)
            if relu:
                for j in range(Wo * O):
                    if yrow[j] < 0:
                        yrow[j] = 0


def conv3x3_grad_weights(real[:, :, :, ::1] x, real[:, :, :, ::1] dy,
                         real[:, :, :, :, ::1] dw_part, int stride):
    """Accumulate per-thread weight-gradient partials into dw_part,
    shaped (n_threads, 3, 3, C, O) and zero-initialized by the caller."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = dy.shape[1], Wo = dy.shape[2], O = dy.shape[3]
    cdef Py_ssize_t bi, i, kh, kw, r, j0, j1, dj, tid
    cdef const real* xp0 = &x[0, 0, 0, 0]
    cdef const real* dyp0 = &dy[0, 0, 0, 0]
    cdef real* dwp0 = &dw_part[0, 0, 0, 0, 0]
    cdef real* dwt
    if B == 0:
        return
    for bi in prange(B, nogil=True, schedule='static'):
        tid = openmp.omp_get_thread_num()
        dwt = dwp0 + tid * 9 * C * O
        for i in range(Ho):
            for kh in range(3):
                r = i * stride + kh - 1
                if r < 0 or r >= H:
                    continue
                for kw in range(3):
                    dj = kw - 1
                    j0 = _first_valid_j(stride, dj)
                    j1 = _last_valid_j(stride, dj, Wo, W, j0)
                    if j1 <= j0:
                        continue
                    if real is float:
                        gw_row_f32(<const float*> xp0 + ((bi * H + r) * W) * C,
                                   <const float*> dyp0 + ((bi * Ho + i) * Wo) * O,
                                   <float*> dwt + (kh * 3 + kw) * C * O,
                                   j0, j1, stride, dj, C, O)
                    else:
                        gw_row_f64(<const double*> xp0 + ((bi * H + r) * W) * C,
                                   <const double*> dyp0 + ((bi * Ho + i) * Wo) * O,
                                   <double*> dwt + (kh * 3 + kw) * C * O,
                                   j0, j1, stride, dj, C, O)


def relu_backward(real[::1] dy, real[::1] y, real[::1] out):
    """out[i] = dy[i] where y[i] > 0 else 0 (flattened views)."""
    cdef Py_ssize_t n = dy.shape[0], i
    for i in prange(n, nogil=True, schedule='static'):
        out[i] = dy[i] if y[i] > 0 else 0


def omp_max_threads():
    return openmp.omp_get_max_threads()
