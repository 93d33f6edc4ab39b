# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: convolution via fused-padding im2col plus BLAS dgemm,
and max pooling with explicit loops. Max pooling matches the NumPy fallback
exactly; convolution agrees to within a few float64 ulps (NumPy routes some
matmul shapes through different BLAS paths, so summation order can differ)."""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm


def _c64(a):
    # contiguous, float64, and writable: broadcast views over size-1 dims can
    # arrive flagged contiguous but read-only, which memoryviews reject
    arr = np.ascontiguousarray(a, dtype=np.float64)
    return arr if arr.flags.writeable else arr.copy()


def _ci64(a):
    arr = np.ascontiguousarray(a, dtype=np.int64)
    return arr if arr.flags.writeable else arr.copy()


cdef void _gemm_rm(double* a, double* b, double* c, int m, int n, int k) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n) through column-major BLAS
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)


cdef void _gemm_rm_abt(double* a, double* b, double* c, int m, int n, int k) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(n,k)^T
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef void _im2col_t(double[:, :, :, ::1] x, double[:, ::1] colT,
                    int kh, int kw, int sh, int sw, int ph, int pw) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t wo = (W + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t ho = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t c, i, j, b, r, q, kidx, base, rr, qlo, qhi, span
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                kidx = (c * kh + i) * kw + j
                if j >= pw:
                    qlo = 0
                else:
                    # clamp: a kernel column can fall wholly in the padding
                    qlo = (pw - j + sw - 1) // sw
                    if qlo > wo:
                        qlo = wo
                # cdivision truncates toward zero, so handle the negative
                # numerator (kernel wider than input plus padding) explicitly
                span = W - 1 - j + pw
                if span < 0:
                    qhi = -1
                else:
                    qhi = span // sw
                    if qhi > wo - 1:
                        qhi = wo - 1
                for b in range(B):
                    for r in range(ho):
                        rr = r * sh + i - ph
                        base = (b * ho + r) * wo
                        if rr < 0 or rr >= H:
                            for q in range(wo):
                                colT[kidx, base + q] = 0.0
                            continue
                        for q in range(qlo):
                            colT[kidx, base + q] = 0.0
                        for q in range(qlo, qhi + 1):
                            colT[kidx, base + q] = x[b, c, rr, q * sw + j - pw]
                        for q in range(qhi + 1, wo):
                            colT[kidx, base + q] = 0.0


cdef void _split_planes(double[:, ::1] y_mat, double[:, :, :, ::1] out) noexcept nogil:
    # (N, B*S) -> (B, N, S); each (n, b) chunk is contiguous on both sides
    cdef Py_ssize_t B = out.shape[0], N = out.shape[1]
    cdef Py_ssize_t S = out.shape[2] * out.shape[3]
    cdef Py_ssize_t b, n, t
    cdef double* src
    cdef double* dst
    for b in range(B):
        for n in range(N):
            src = &y_mat[n, b * S]
            dst = &out[b, n, 0, 0]
            for t in range(S):
                dst[t] = src[t]


def conv2d_forward(x, w, int stride, int padding):
    x = _c64(x)
    w = _c64(w)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t N = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (W + 2 * padding - kw) // stride + 1
    colT_arr = np.empty((C * kh * kw, B * ho * wo), dtype=np.float64)
    cdef double[:, ::1] colT = colT_arr
    cdef double[:, :, :, ::1] xv = x
    _im2col_t(xv, colT, kh, kw, stride, stride, padding, padding)
    w_mat = w.reshape(N, C * kh * kw)
    y_mat_arr = np.empty((N, B * ho * wo), dtype=np.float64)
    cdef double[:, ::1] wm = w_mat
    cdef double[:, ::1] ym = y_mat_arr
    _gemm_rm(&wm[0, 0], &colT[0, 0], &ym[0, 0], N, B * ho * wo, C * kh * kw)
    out = np.empty((B, N, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    _split_planes(ym, ov)
    return out


cdef void _im2col_dilated(double[:, :, :, ::1] gy, double[:, ::1] colT,
                          int kh, int kw, int stride, int padding,
                          Py_ssize_t H, Py_ssize_t W) noexcept nogil:
    # column matrix of the stride-dilated gy padded so a unit-stride forward
    # conv with flipped kernels lands exactly on the (H, W) input grid
    cdef Py_ssize_t B = gy.shape[0], N = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t n, i, j, b, r, q, kidx, base, rr, cc, off_r, off_c
    for n in range(N):
        for i in range(kh):
            for j in range(kw):
                kidx = (n * kh + i) * kw + j
                off_r = i + padding - kh + 1
                off_c = j + padding - kw + 1
                for b in range(B):
                    for r in range(H):
                        rr = r + off_r
                        base = (b * H + r) * W
                        if rr < 0 or rr % stride != 0 or rr // stride >= ho:
                            for q in range(W):
                                colT[kidx, base + q] = 0.0
                            continue
                        rr = rr // stride
                        for q in range(W):
                            cc = q + off_c
                            if cc < 0 or cc % stride != 0 or cc // stride >= wo:
                                colT[kidx, base + q] = 0.0
                            else:
                                colT[kidx, base + q] = gy[b, n, rr, cc // stride]


def conv2d_backward_input(gy, w, int stride, int padding, input_hw):
    gy = _c64(gy)
    w = _c64(w)
    cdef Py_ssize_t B = gy.shape[0], N = gy.shape[1]
    cdef Py_ssize_t C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t H = input_hw[0], W = input_hw[1]
    # flipped kernels regrouped by input channel: (C, N*kh*kw)
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(C, N * kh * kw)
    colT_arr = np.empty((N * kh * kw, B * H * W), dtype=np.float64)
    cdef double[:, ::1] colT = colT_arr
    cdef double[:, :, :, ::1] gv = gy
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        # unit stride: the dilated column matrix is a plain padded im2col of gy
        _im2col_t(gv, colT, kh, kw, 1, 1, kh - 1 - padding, kw - 1 - padding)
    else:
        _im2col_dilated(gv, colT, kh, kw, stride, padding, H, W)
    g_mat_arr = np.empty((C, B * H * W), dtype=np.float64)
    cdef double[:, ::1] wm = wf
    cdef double[:, ::1] gm = g_mat_arr
    _gemm_rm(&wm[0, 0], &colT[0, 0], &gm[0, 0], C, B * H * W, N * kh * kw)
    gx = np.empty((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    _split_planes(gm, gxv)
    return gx


cdef void _merge_planes(double[:, :, :, ::1] gy, double[:, ::1] gy2) noexcept nogil:
    # (B, N, S) -> (N, B*S)
    cdef Py_ssize_t B = gy.shape[0], N = gy.shape[1]
    cdef Py_ssize_t S = gy.shape[2] * gy.shape[3]
    cdef Py_ssize_t b, n, t
    cdef double* src
    cdef double* dst
    for b in range(B):
        for n in range(N):
            src = &gy[b, n, 0, 0]
            dst = &gy2[n, b * S]
            for t in range(S):
                dst[t] = src[t]


def conv2d_backward_kernels(gy, x, kernel_shape, int stride, int padding):
    gy = _c64(gy)
    x = _c64(x)
    cdef Py_ssize_t N = kernel_shape[0], C = kernel_shape[1]
    cdef Py_ssize_t kh = kernel_shape[2], kw = kernel_shape[3]
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t M = B * ho * wo, K = C * kh * kw
    colT_arr = np.empty((K, M), dtype=np.float64)
    cdef double[:, ::1] colT = colT_arr
    cdef double[:, :, :, ::1] xv = x
    _im2col_t(xv, colT, kh, kw, stride, stride, padding, padding)
    gy2_arr = np.empty((N, M), dtype=np.float64)
    cdef double[:, ::1] gy2 = gy2_arr
    cdef double[:, :, :, ::1] gv = gy
    _merge_planes(gv, gy2)
    gw = np.empty((N, K), dtype=np.float64)
    cdef double[:, ::1] gwv = gw
    _gemm_rm_abt(&gy2[0, 0], &colT[0, 0], &gwv[0, 0], N, K, M)
    return gw.reshape(N, C, kh, kw)


def maxpool2d_forward(x, int kh, int kw, int sh, int sw):
    x = _c64(x)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t ho = (H - kh) // sh + 1
    cdef Py_ssize_t wo = (W - kw) // sw + 1
    y = np.empty((B, C, ho, wo), dtype=np.float64)
    idx = np.empty((B, C, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] yv = y
    cdef long long[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, c, r, q, i, j, r0, c0
    cdef double best, v
    cdef Py_ssize_t best_at
    with nogil:
        for b in range(B):
            for c in range(C):
                for r in range(ho):
                    for q in range(wo):
                        r0 = r * sh
                        c0 = q * sw
                        best = xv[b, c, r0, c0]
                        best_at = r0 * W + c0
                        for i in range(kh):
                            for j in range(kw):
                                v = xv[b, c, r0 + i, c0 + j]
                                if v > best:
                                    best = v
                                    best_at = (r0 + i) * W + (c0 + j)
                        yv[b, c, r, q] = best
                        iv[b, c, r, q] = best_at
    return y, idx


def maxpool2d_backward(gy, idx, input_shape, int kh, int kw, int sh, int sw):
    gy = _c64(gy)
    idx = _ci64(idx)
    cdef Py_ssize_t B = input_shape[0], C = input_shape[1]
    cdef Py_ssize_t H = input_shape[2], W = input_shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    gx = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gv = gy
    cdef long long[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, c, r, q
    cdef double* plane
    with nogil:
        for b in range(B):
            for c in range(C):
                plane = &gxv[b, c, 0, 0]
                for r in range(ho):
                    for q in range(wo):
                        plane[iv[b, c, r, q]] += gv[b, c, r, q]
    return gx
