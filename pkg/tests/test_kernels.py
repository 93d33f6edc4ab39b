"""Numerics for the convolution and pooling kernels on every available backend.

The reference implementations here are deliberately naive nested loops taken
straight from the definitions, so they share no code with either backend.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlkit import kernels as K
from mtlkit.kernels import use_backend

BACKENDS = K.available_backends()
BOTH = pytest.mark.skipif(len(BACKENDS) < 2, reason="only one backend built")


# ------------------------------------------------------------ loop references

def conv_ref(x, w, stride, padding):
    B, C, H, W = x.shape
    n_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    y = np.zeros((B, n_out, ho, wo))
    for b in range(B):
        for o in range(n_out):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[b, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    y[b, o, r, q] = np.sum(patch * w[o])
    return y


def conv_bwd_input_ref(gy, w, stride, padding, input_hw):
    """Scatter-add of w[o] into every window position, straight from the chain rule."""
    B, n_out, ho, wo = gy.shape
    _, C, kh, kw = w.shape
    H, W = input_hw
    gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for b in range(B):
        for o in range(n_out):
            for r in range(ho):
                for q in range(wo):
                    gxp[b, :, r * stride:r * stride + kh, q * stride:q * stride + kw] += (
                        gy[b, o, r, q] * w[o]
                    )
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
    return gxp


def conv_bwd_kernels_ref(gy, x, kernel_shape, stride, padding):
    B, n_out, ho, wo = gy.shape
    _, _, kh, kw = kernel_shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gw = np.zeros(kernel_shape)
    for b in range(B):
        for o in range(n_out):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[b, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    gw[o] += gy[b, o, r, q] * patch
    return gw


def _conv_case(rng):
    B = int(rng.integers(1, 4))
    C = int(rng.integers(1, 4))
    n_out = int(rng.integers(1, 4))
    kh = int(rng.integers(1, 4))
    kw = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    # keep at least one window even with zero padding
    H = int(rng.integers(kh, kh + 7))
    W = int(rng.integers(kw, kw + 7))
    x = rng.standard_normal((B, C, H, W))
    w = rng.standard_normal((n_out, C, kh, kw))
    return x, w, stride, padding


# --------------------------------------------------------------- convolution

@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_forward_matches_reference(backend):
    rng = np.random.default_rng(7)
    with use_backend(backend):
        for _ in range(30):
            x, w, stride, padding = _conv_case(rng)
            got = K.conv2d_forward(x, w, stride, padding)
            ref = conv_ref(x, w, stride, padding)
            assert got.shape == ref.shape
            np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_backward_input_matches_reference(backend):
    rng = np.random.default_rng(8)
    with use_backend(backend):
        for _ in range(30):
            x, w, stride, padding = _conv_case(rng)
            y = conv_ref(x, w, stride, padding)
            gy = rng.standard_normal(y.shape)
            got = K.conv2d_backward_input(gy, w, stride, padding, x.shape[2:])
            ref = conv_bwd_input_ref(gy, w, stride, padding, x.shape[2:])
            assert got.shape == x.shape
            np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_backward_kernels_matches_reference(backend):
    rng = np.random.default_rng(9)
    with use_backend(backend):
        for _ in range(30):
            x, w, stride, padding = _conv_case(rng)
            y = conv_ref(x, w, stride, padding)
            gy = rng.standard_normal(y.shape)
            got = K.conv2d_backward_kernels(gy, x, w.shape, stride, padding)
            ref = conv_bwd_kernels_ref(gy, x, w.shape, stride, padding)
            np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-12)


# padding can make the grid valid even when the kernel exceeds the raw input
# on an axis; kernel columns then fall entirely inside the padding and the
# valid column range collapses or vanishes
NARROW_CASES = [
    ((1, 1, 5, 1), (1, 1, 3, 3), 2, 1),
    ((2, 2, 5, 1), (1, 2, 3, 3), 2, 1),
    ((1, 1, 1, 1), (2, 1, 5, 5), 1, 2),
    ((1, 2, 1, 3), (2, 2, 5, 3), 1, 2),
    ((3, 1, 7, 2), (2, 1, 3, 4), 2, 1),
]


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_kernel_wider_than_input(backend):
    rng = np.random.default_rng(11)
    with use_backend(backend):
        for xs, ws, stride, padding in NARROW_CASES:
            x = rng.standard_normal(xs)
            w = rng.standard_normal(ws)
            y = K.conv2d_forward(x, w, stride, padding)
            np.testing.assert_allclose(y, conv_ref(x, w, stride, padding),
                                       rtol=1e-11, atol=1e-12)
            gy = rng.standard_normal(y.shape)
            np.testing.assert_allclose(
                K.conv2d_backward_input(gy, w, stride, padding, x.shape[2:]),
                conv_bwd_input_ref(gy, w, stride, padding, x.shape[2:]),
                rtol=1e-11, atol=1e-12)
            np.testing.assert_allclose(
                K.conv2d_backward_kernels(gy, x, w.shape, stride, padding),
                conv_bwd_kernels_ref(gy, x, w.shape, stride, padding),
                rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_backwards_are_adjoint_to_forward(backend):
    # <gy, conv(x, w)> == <bwd_input(gy), x> == <bwd_kernels(gy), w>
    rng = np.random.default_rng(10)
    with use_backend(backend):
        for _ in range(20):
            x, w, stride, padding = _conv_case(rng)
            y = K.conv2d_forward(x, w, stride, padding)
            gy = rng.standard_normal(y.shape)
            lhs = float(np.sum(gy * y))
            via_x = float(np.sum(K.conv2d_backward_input(gy, w, stride, padding, x.shape[2:]) * x))
            via_w = float(np.sum(K.conv2d_backward_kernels(gy, x, w.shape, stride, padding) * w))
            scale = max(abs(lhs), 1.0)
            assert abs(lhs - via_x) / scale < 1e-12
            assert abs(lhs - via_w) / scale < 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("H,W", [(5, 7), (6, 9), (7, 5)])
def test_conv_backward_input_covers_rows_no_window_reaches(backend, H, W):
    # stride 2 with odd leftovers: trailing rows/cols get exactly zero gradient
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, H, W))
    w = rng.standard_normal((3, 2, 2, 2))
    with use_backend(backend):
        y = K.conv2d_forward(x, w, stride=2, padding=0)
        gy = rng.standard_normal(y.shape)
        gx = K.conv2d_backward_input(gy, w, 2, 0, (H, W))
    ref = conv_bwd_input_ref(gy, w, 2, 0, (H, W))
    assert gx.shape == x.shape
    np.testing.assert_allclose(gx, ref, rtol=1e-11, atol=1e-12)
    reach_h = (y.shape[2] - 1) * 2 + 2
    reach_w = (y.shape[3] - 1) * 2 + 2
    assert np.all(gx[:, :, reach_h:, :] == 0.0)
    assert np.all(gx[:, :, :, reach_w:] == 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_accepts_readonly_inputs(backend):
    x = np.broadcast_to(np.ones((1, 1, 1, 4)), (2, 1, 4, 4))
    assert not x.flags.writeable
    w = np.ones((1, 1, 2, 2))
    w.flags.writeable = False
    with use_backend(backend):
        y = K.conv2d_forward(x, w, 1, 0)
        gy = np.broadcast_to(np.float64(1.0), y.shape)
        gx = K.conv2d_backward_input(gy, w, 1, 0, (4, 4))
        gw = K.conv2d_backward_kernels(gy, x, w.shape, 1, 0)
    assert np.all(y == 4.0)
    assert gx.shape == x.shape and gw.shape == w.shape


# ---------------------------------------------------------------- max pooling

@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_forward_values_and_indices(backend):
    rng = np.random.default_rng(12)
    with use_backend(backend):
        for _ in range(25):
            B = int(rng.integers(1, 3))
            C = int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            sh, sw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            H = int(rng.integers(kh, kh + 6))
            W = int(rng.integers(kw, kw + 6))
            x = rng.standard_normal((B, C, H, W))
            y, idx = K.maxpool2d_forward(x, kh, kw, sh, sw)
            ho = (H - kh) // sh + 1
            wo = (W - kw) // sw + 1
            assert y.shape == (B, C, ho, wo)
            for b in range(B):
                for c in range(C):
                    for r in range(ho):
                        for q in range(wo):
                            win = x[b, c, r * sh:r * sh + kh, q * sw:q * sw + kw]
                            assert y[b, c, r, q] == win.max()
                            fr, fq = divmod(int(idx[b, c, r, q]), W)
                            assert x[b, c, fr, fq] == win.max()


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_tie_takes_first_window_position(backend):
    x = np.zeros((1, 1, 4, 4))
    with use_backend(backend):
        y, idx = K.maxpool2d_forward(x, 2, 2, 2, 2)
    assert np.all(y == 0.0)
    # row-major scan order within each window, so the top-left entry wins
    np.testing.assert_array_equal(idx.ravel(), [0, 2, 8, 10])


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_backward_scatters_to_argmax(backend):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 6, 8))
    with use_backend(backend):
        y, idx = K.maxpool2d_forward(x, 2, 2, 2, 2)
        gy = rng.standard_normal(y.shape)
        gx = K.maxpool2d_backward(gy, idx, x.shape, 2, 2, 2, 2)
    assert gx.shape == x.shape
    # windows are disjoint here, so each upstream value lands exactly once
    assert np.isclose(gx.sum(), gy.sum(), rtol=1e-12)
    flat_x = gx.reshape(2, 3, -1)
    for b in range(2):
        for c in range(3):
            for r in range(y.shape[2]):
                for q in range(y.shape[3]):
                    assert flat_x[b, c, int(idx[b, c, r, q])] == gy[b, c, r, q]
    hit = np.zeros(gx.shape, dtype=bool).reshape(2, 3, -1)
    for b in range(2):
        for c in range(3):
            hit[b, c, idx[b, c].ravel()] = True
    assert np.all(gx.reshape(2, 3, -1)[~hit] == 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_backward_accumulates_on_overlap(backend):
    # stride 1 windows overlap; a strict maximum collects every window it tops
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    with use_backend(backend):
        y, idx = K.maxpool2d_forward(x, 2, 2, 1, 1)
        gx = K.maxpool2d_backward(np.ones_like(y), idx, x.shape, 2, 2, 1, 1)
    assert gx[0, 0, 1, 1] == 4.0
    assert gx.sum() == 4.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_backward_accepts_readonly_gradient(backend):
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    with use_backend(backend):
        y, idx = K.maxpool2d_forward(x, 2, 2, 2, 2)
        gy = np.broadcast_to(np.float64(1.0), y.shape)
        assert not gy.flags.writeable
        gx = K.maxpool2d_backward(gy, idx, x.shape, 2, 2, 2, 2)
    assert gx.sum() == 4.0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    kh=st.integers(1, 3),
    kw=st.integers(1, 3),
    sh=st.integers(1, 3),
    sw=st.integers(1, 3),
)
def test_maxpool_roundtrip_bounds(seed, kh, kw, sh, sw):
    rng = np.random.default_rng(seed)
    H = kh + int(rng.integers(0, 5))
    W = kw + int(rng.integers(0, 5))
    x = rng.standard_normal((1, 2, H, W))
    y, idx = K.maxpool2d_forward(x, kh, kw, sh, sw)
    assert np.all(y <= x.max()) and np.all(y >= x.min())
    gy = rng.standard_normal(y.shape)
    gx = K.maxpool2d_backward(gy, idx, x.shape, kh, kw, sh, sw)
    # every upstream entry is routed somewhere, possibly stacked on one cell
    assert np.isclose(gx.sum(), gy.sum(), rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------- backend parity

@BOTH
def test_backends_agree_on_conv():
    rng = np.random.default_rng(14)
    for _ in range(20):
        x, w, stride, padding = _conv_case(rng)
        gy = rng.standard_normal(conv_ref(x, w, stride, padding).shape)
        outs = {}
        for name in BACKENDS:
            with use_backend(name):
                outs[name] = (
                    K.conv2d_forward(x, w, stride, padding),
                    K.conv2d_backward_input(gy, w, stride, padding, x.shape[2:]),
                    K.conv2d_backward_kernels(gy, x, w.shape, stride, padding),
                )
        a, b = (outs[name] for name in BACKENDS)
        for u, v in zip(a, b):
            # BLAS may reassociate differently between layouts; parity is a few ulps
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-13)


@BOTH
def test_backends_agree_bitwise_on_maxpool():
    rng = np.random.default_rng(15)
    for _ in range(20):
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sh, sw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((2, 3, kh + 5, kw + 5))
        got = {}
        for name in BACKENDS:
            with use_backend(name):
                got[name] = K.maxpool2d_forward(x, kh, kw, sh, sw)
        (y1, i1), (y2, i2) = (got[name] for name in BACKENDS)
        np.testing.assert_array_equal(y1, y2)
        np.testing.assert_array_equal(i1, i2)


# ---------------------------------------------------------- backend selection

def test_use_backend_restores_previous_choice():
    before = K.BACKEND
    other = next(n for n in BACKENDS if n != before) if len(BACKENDS) > 1 else before
    with use_backend(other):
        assert K.BACKEND == other
    assert K.BACKEND == before


def test_use_backend_rejects_unknown_name():
    with pytest.raises(Exception):
        with use_backend("fortran"):
            pass
