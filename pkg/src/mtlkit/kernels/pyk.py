"""NumPy fallback kernels for convolution and max pooling.

Convolution is im2col plus one BLAS matmul. The column matrix is laid out
transposed, shape (C*kh*kw, B*ho*wo), so the GEMM runs as
(C_out, K) @ (K, M); on this layout the relayout copies are cheapest.
Backward-input reuses the forward path on a stride-dilated upstream gradient
against flipped, channel-swapped kernels, so no scatter-add is needed.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col_t(x, kh, kw, sh, sw, ph, pw):
    """Return (colT, ho, wo) where colT[(c*kh+i)*kw+j, (b*ho+r)*wo+q] = xp[b,c,r*sh+i,q*sw+j]."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    Hp, Wp = xp.shape[2], xp.shape[3]
    ho = (Hp - kh) // sh + 1
    wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        (C, kh, kw, B, ho, wo),
        (s1, s2, s3, s0, s2 * sh, s3 * sw),
        writeable=False,
    )
    colT = np.ascontiguousarray(win).reshape(C * kh * kw, B * ho * wo)
    return colT, ho, wo


def _conv_forward(x, w, sh, sw, ph, pw):
    B = x.shape[0]
    n_out = w.shape[0]
    colT, ho, wo = _im2col_t(x, w.shape[2], w.shape[3], sh, sw, ph, pw)
    y = w.reshape(n_out, -1) @ colT
    return np.ascontiguousarray(y.reshape(n_out, B, ho, wo).transpose(1, 0, 2, 3))


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x (B,C,H,W) with w (C_out,C,kh,kw); symmetric stride/padding."""
    return _conv_forward(x, w, stride, stride, padding, padding)


def conv2d_backward_input(gy, w, stride, padding, input_hw):
    """Gradient w.r.t. x: forward conv of the dilated gy with flipped kernels."""
    B, n_out, ho, wo = gy.shape
    kh, kw = w.shape[2], w.shape[3]
    H, W = input_hw
    if stride > 1:
        # trailing input rows/cols no window reaches still need zero gradient,
        # so extend the dilated grid by the stride remainder
        mh = (H + 2 * padding - kh) - (ho - 1) * stride
        mw = (W + 2 * padding - kw) - (wo - 1) * stride
        D = np.zeros(
            (B, n_out, (ho - 1) * stride + 1 + mh, (wo - 1) * stride + 1 + mw),
            dtype=gy.dtype,
        )
        D[:, :, ::stride, ::stride] = gy
    else:
        D = gy
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full = _conv_forward(D, wf, 1, 1, kh - 1, kw - 1)
    return np.ascontiguousarray(full[:, :, padding:padding + H, padding:padding + W])


def conv2d_backward_kernels(gy, x, kernel_shape, stride, padding):
    """Gradient w.r.t. w: gy collapsed to (C_out, M) times the column matrix transposed."""
    n_out, C, kh, kw = kernel_shape
    colT, ho, wo = _im2col_t(x, kh, kw, stride, stride, padding, padding)
    gy2 = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(n_out, -1)
    return (gy2 @ colT.T).reshape(n_out, C, kh, kw)


def maxpool2d_forward(x, kh, kw, sh, sw):
    """Return (y, idx); idx holds the plane-flat argmax r*W + c per output cell.

    Ties pick the first entry in row-major window order.
    """
    B, C, H, W = x.shape
    ho = (H - kh) // sh + 1
    wo = (W - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        (B, C, ho, wo, kh, kw),
        (s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    flat = np.ascontiguousarray(win).reshape(B, C, ho, wo, kh * kw)
    arg = flat.argmax(axis=4)
    y = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    di, dj = np.divmod(arg, kw)
    rows = di + (np.arange(ho) * sh)[None, None, :, None]
    cols = dj + (np.arange(wo) * sw)[None, None, None, :]
    idx = (rows * W + cols).astype(np.int64)
    return y, idx


def maxpool2d_backward(gy, idx, input_shape, kh, kw, sh, sw):
    """Scatter gy back to the argmax positions recorded by the forward pass."""
    B, C, H, W = input_shape
    gxf = np.zeros((B, C, H * W), dtype=gy.dtype)
    flat_idx = idx.reshape(B, C, -1)
    flat_gy = gy.reshape(B, C, -1)
    if sh >= kh and sw >= kw:
        # disjoint windows cannot collide, plain assignment suffices
        np.put_along_axis(gxf, flat_idx, flat_gy, axis=2)
    else:
        b = np.repeat(np.arange(B), C * flat_idx.shape[2])
        c = np.tile(np.repeat(np.arange(C), flat_idx.shape[2]), B)
        np.add.at(gxf, (b, c, flat_idx.ravel()), flat_gy.ravel())
    return gxf.reshape(B, C, H, W)
