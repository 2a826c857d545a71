import numpy as np
import pytest

from stica import _kernels as K


def rnd(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def conv2d_loop(x, w, stride, pad):
    """Index-by-index reference convolution."""
    b, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    y = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                hh = i * stride + a - pad
                                ww = j * stride + bb - pad
                                if 0 <= hh < h and 0 <= ww < wid:
                                    acc += x[n, ic, hh, ww] * w[oc, ic, a, bb]
                    y[n, oc, i, j] = acc
    return y


def conv1d_loop(x, w, stride, pad):
    b, c, t, m = x.shape
    o, _, kt = w.shape
    to = (t + 2 * pad - kt) // stride + 1
    y = np.zeros((b, o, to, m))
    for n in range(b):
        for oc in range(o):
            for i in range(to):
                for j in range(m):
                    acc = 0.0
                    for ic in range(c):
                        for k in range(kt):
                            tt = i * stride + k - pad
                            if 0 <= tt < t:
                                acc += x[n, ic, tt, j] * w[oc, ic, k]
                    y[n, oc, i, j] = acc
    return y


CASES_2D = [
    (1, 1, 5, 5, 1, 3, 1, 1),
    (2, 3, 8, 8, 4, 3, 2, 1),
    (1, 2, 7, 9, 3, 3, 1, 0),
    (2, 2, 6, 6, 2, 1, 2, 0),
]


@pytest.mark.parametrize("b,c,h,w,o,k,s,p", CASES_2D)
def test_conv2d_fwd_matches_loop_oracle(b, c, h, w, o, k, s, p):
    x = rnd((b, c, h, w), 1)
    wt = rnd((o, c, k, k), 2)
    expected = conv2d_loop(x, wt, s, p)
    np.testing.assert_allclose(K.conv2d_fwd(x, wt, s, p), expected, atol=1e-12)
    np.testing.assert_allclose(K.numpy_impls["conv2d_fwd"](x, wt, s, p), expected, atol=1e-12)


def test_conv2d_interior_all_ones_is_nine():
    x = np.ones((1, 1, 5, 5))
    w = np.ones((1, 1, 3, 3))
    y = K.conv2d_fwd(x, w, 1, 0)
    assert y[0, 0, 1, 1] == 9.0


@pytest.mark.parametrize("b,c,h,w,o,k,s,p", CASES_2D)
def test_conv2d_backward_matches_finite_differences(b, c, h, w, o, k, s, p):
    x = rnd((b, c, h, w), 3)
    wt = rnd((o, c, k, k), 4)
    gy = rnd(K.conv2d_fwd(x, wt, s, p).shape, 5)

    gx = K.conv2d_bwd_x(gy, wt, s, p, h, w)
    gw = K.conv2d_bwd_w(gy, x, s, p, k, k)

    def f(xx, ww):
        return float((conv2d_loop(xx, ww, s, p) * gy).sum())

    eps = 1e-6
    for idx in [(0, 0, 0, 0), (b - 1, c - 1, h - 1, w - 1), (0, c - 1, h // 2, w // 2)]:
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        np.testing.assert_allclose(gx[idx], (f(xp, wt) - f(xm, wt)) / (2 * eps), atol=1e-5)
    for idx in [(0, 0, 0, 0), (o - 1, c - 1, k - 1, k - 1)]:
        wp = wt.copy()
        wp[idx] += eps
        wm = wt.copy()
        wm[idx] -= eps
        np.testing.assert_allclose(gw[idx], (f(x, wp) - f(x, wm)) / (2 * eps), atol=1e-5)


CASES_1D = [
    (1, 1, 6, 4, 1, 3, 1, 1),
    (2, 3, 8, 5, 4, 3, 2, 1),
    (2, 2, 8, 3, 2, 1, 2, 0),
]


@pytest.mark.parametrize("b,c,t,m,o,k,s,p", CASES_1D)
def test_conv1d_fwd_matches_loop_oracle(b, c, t, m, o, k, s, p):
    x = rnd((b, c, t, m), 6)
    wt = rnd((o, c, k), 7)
    expected = conv1d_loop(x, wt, s, p)
    np.testing.assert_allclose(K.conv1d_fwd(x, wt, s, p), expected, atol=1e-12)
    np.testing.assert_allclose(K.numpy_impls["conv1d_fwd"](x, wt, s, p), expected, atol=1e-12)


@pytest.mark.parametrize("b,c,t,m,o,k,s,p", CASES_1D)
def test_conv1d_backward_matches_numpy_backend(b, c, t, m, o, k, s, p):
    x = rnd((b, c, t, m), 8)
    wt = rnd((o, c, k), 9)
    gy = rnd(K.conv1d_fwd(x, wt, s, p).shape, 10)
    np.testing.assert_allclose(
        K.conv1d_bwd_x(gy, wt, s, p, t), K.numpy_impls["conv1d_bwd_x"](gy, wt, s, p, t), atol=1e-12
    )
    np.testing.assert_allclose(
        K.conv1d_bwd_w(gy, x, s, p, k), K.numpy_impls["conv1d_bwd_w"](gy, x, s, p, k), atol=1e-12
    )


@pytest.mark.parametrize("b,c,h,w,o,k,s,p", CASES_2D)
def test_conv2d_backends_agree(b, c, h, w, o, k, s, p):
    x = rnd((b, c, h, w), 11)
    wt = rnd((o, c, k, k), 12)
    gy = rnd(K.conv2d_fwd(x, wt, s, p).shape, 13)
    np.testing.assert_allclose(
        K.conv2d_bwd_x(gy, wt, s, p, h, w),
        K.numpy_impls["conv2d_bwd_x"](gy, wt, s, p, h, w),
        atol=1e-12,
    )
    np.testing.assert_allclose(
        K.conv2d_bwd_w(gy, x, s, p, k, k),
        K.numpy_impls["conv2d_bwd_w"](gy, x, s, p, k, k),
        atol=1e-12,
    )


def test_out_len_rejects_degenerate():
    with pytest.raises(ValueError, match="< 1"):
        K.conv_out_len(2, 5, 1, 0)
