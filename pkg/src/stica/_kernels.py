"""Convolution kernels, the hot inner loops of the encoders.

Two interchangeable backends operate on plain float64 ndarrays:

* ``numba`` -- ``@njit(cache=True)`` kernels that build per-item im2col
  buffers with explicit loops and push the contraction through
  ``np.dot`` (BLAS), with fused col2im scatter loops on the backward
  path. Default whenever numba imports cleanly.
* ``numpy`` -- strided window views contracted with ``np.tensordot``.

``STICA_NUMBA=0`` (or ``false``/``no``) in the environment forces the
numpy path. The selection happens once at import; both implementations
stay importable for equivalence tests and for ``benchmarks/bench_kernels.py``.

Shapes (row-major, float64 throughout):

* spatial conv: x ``(B, C, H, W)``, w ``(O, C, KH, KW)`` -> ``(B, O, Ho, Wo)``
* temporal conv: x ``(B, C, T, M)``, w ``(O, C, KT)`` -> ``(B, O, To, M)``

where ``M`` is a flattened trailing axis the temporal conv is shared over.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "BACKEND",
    "conv2d_fwd",
    "conv2d_bwd_x",
    "conv2d_bwd_w",
    "conv1d_fwd",
    "conv1d_bwd_x",
    "conv1d_bwd_w",
    "conv_out_len",
]


def conv_out_len(n, kernel, stride, pad):
    """Output extent of a 1-D convolution; rejects degenerate results."""
    out = (n + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"convolution output extent {out} < 1 "
            f"(extent {n}, kernel {kernel}, stride {stride}, pad {pad})"
        )
    return out


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _windows(xp, kh, kw, stride, ho, wo):
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(xp.shape[0], xp.shape[1], kh, kw, ho, wo),
                      strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))


def _np_conv2d_fwd(x, w, stride, pad):
    o, _, kh, kw = w.shape
    ho = conv_out_len(x.shape[2], kh, stride, pad)
    wo = conv_out_len(x.shape[3], kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride, ho, wo)
    y = np.tensordot(w, win, axes=([1, 2, 3], [1, 2, 3]))  # (O, B, Ho, Wo)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _np_conv2d_bwd_x(gy, w, stride, pad, h, wid):
    b, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gcols = np.tensordot(gy, w, axes=([1], [0]))  # (B, Ho, Wo, C, KH, KW)
    gcols = np.ascontiguousarray(gcols.transpose(0, 3, 4, 5, 1, 2))  # (B,C,KH,KW,Ho,Wo)
    gxp = np.zeros((b, c, h + 2 * pad, wid + 2 * pad))
    for a in range(kh):
        for bb in range(kw):
            gxp[:, :, a : a + stride * ho : stride,
                bb : bb + stride * wo : stride] += gcols[:, :, a, bb]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad].copy()
    return gxp


def _np_conv2d_bwd_w(gy, x, stride, pad, kh, kw):
    ho, wo = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride, ho, wo)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 4, 5]))


def _np_conv1d_fwd(x, w, stride, pad):
    o, _, kt = w.shape
    to = conv_out_len(x.shape[2], kt, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    y = np.zeros((x.shape[0], o, to, x.shape[3]))
    for k in range(kt):
        y += np.einsum("bctm,oc->botm", xp[:, :, k : k + stride * to : stride],
                       w[:, :, k], optimize=True)
    return y


def _np_conv1d_bwd_x(gy, w, stride, pad, t):
    b, o, to, m = gy.shape
    _, c, kt = w.shape
    gxp = np.zeros((b, c, t + 2 * pad, m))
    for k in range(kt):
        gxp[:, :, k : k + stride * to : stride] += np.einsum(
            "botm,oc->bctm", gy, w[:, :, k], optimize=True)
    if pad:
        return gxp[:, :, pad:-pad].copy()
    return gxp


def _np_conv1d_bwd_w(gy, x, stride, pad, kt):
    to = gy.shape[2]
    c = x.shape[1]
    o = gy.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    gw = np.zeros((o, c, kt))
    for k in range(kt):
        gw[:, :, k] = np.einsum("botm,bctm->oc", gy,
                                xp[:, :, k : k + stride * to : stride], optimize=True)
    return gw


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def im2col_item(x, nb, kh, kw, stride, pad, ho, wo):
        """One batch item -> (ho*wo, c*kh*kw) patch matrix."""
        c, h, wid = x.shape[1], x.shape[2], x.shape[3]
        cols = np.zeros((ho * wo, c * kh * kw))
        for ic in range(c):
            for a in range(kh):
                for bb in range(kw):
                    col = (ic * kh + a) * kw + bb
                    for i in range(ho):
                        hh = i * stride + a - pad
                        if hh < 0 or hh >= h:
                            continue
                        base = i * wo
                        j0 = 0
                        while j0 * stride + bb - pad < 0:
                            j0 += 1
                        j1 = wo
                        while j1 > j0 and (j1 - 1) * stride + bb - pad >= wid:
                            j1 -= 1
                        for j in range(j0, j1):
                            cols[base + j, col] = x[nb, ic, hh, j * stride + bb - pad]
        return cols

    @njit(cache=True)
    def nb_conv2d_fwd(x, w, stride, pad, ho, wo):
        b = x.shape[0]
        o, c, kh, kw = w.shape
        w2t = np.ascontiguousarray(w.reshape(o, c * kh * kw).T)
        y = np.empty((b, o, ho, wo))
        for nb in range(b):
            cols = im2col_item(x, nb, kh, kw, stride, pad, ho, wo)
            yi = np.dot(cols, w2t)  # (ho*wo, o)
            for oc in range(o):
                for i in range(ho):
                    for j in range(wo):
                        y[nb, oc, i, j] = yi[i * wo + j, oc]
        return y

    @njit(cache=True)
    def nb_conv2d_bwd_x(gy, w, stride, pad, h, wid):
        b, o, ho, wo = gy.shape
        c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        w2 = np.ascontiguousarray(w.reshape(o, c * kh * kw))
        gx = np.zeros((b, c, h, wid))
        gyt = np.empty((ho * wo, o))
        for nb in range(b):
            for oc in range(o):
                for i in range(ho):
                    for j in range(wo):
                        gyt[i * wo + j, oc] = gy[nb, oc, i, j]
            gcols = np.dot(gyt, w2)  # (ho*wo, c*kh*kw)
            for ic in range(c):
                for a in range(kh):
                    for bb in range(kw):
                        col = (ic * kh + a) * kw + bb
                        for i in range(ho):
                            hh = i * stride + a - pad
                            if hh < 0 or hh >= h:
                                continue
                            base = i * wo
                            j0 = 0
                            while j0 * stride + bb - pad < 0:
                                j0 += 1
                            j1 = wo
                            while j1 > j0 and (j1 - 1) * stride + bb - pad >= wid:
                                j1 -= 1
                            for j in range(j0, j1):
                                gx[nb, ic, hh, j * stride + bb - pad] += gcols[base + j, col]
        return gx

    @njit(cache=True)
    def nb_conv2d_bwd_w(gy, x, stride, pad, kh, kw):
        b, o, ho, wo = gy.shape
        c = x.shape[1]
        gw2 = np.zeros((o, c * kh * kw))
        gy2 = np.empty((o, ho * wo))
        for nb in range(b):
            cols = im2col_item(x, nb, kh, kw, stride, pad, ho, wo)
            for oc in range(o):
                for i in range(ho):
                    for j in range(wo):
                        gy2[oc, i * wo + j] = gy[nb, oc, i, j]
            gw2 += np.dot(gy2, cols)
        return gw2.reshape(o, c, kh, kw)

    @njit(cache=True)
    def nb_conv1d_fwd(x, w, stride, pad, to):
        b, c, t, m = x.shape
        o, _, kt = w.shape
        y = np.zeros((b, o, to, m))
        if kt == 1 and pad == 0:
            # pointwise channel mixing at strided time steps
            w0 = np.ascontiguousarray(w[:, :, 0])
            xsel = np.empty((c, to * m))
            for nb in range(b):
                if stride == 1:
                    yk = np.dot(w0, x[nb].reshape(c, t * m))
                else:
                    for i in range(to):
                        xsel[:, i * m : (i + 1) * m] = x[nb, :, i * stride, :]
                    yk = np.dot(w0, xsel)
                y[nb] = yk.reshape(o, to, m)
            return y
        xsel = np.empty((c, to * m))
        for nb in range(b):
            for k in range(kt):
                wk = np.ascontiguousarray(w[:, :, k])
                valid = np.zeros(to, dtype=np.bool_)
                for i in range(to):
                    tt = i * stride + k - pad
                    if 0 <= tt < t:
                        valid[i] = True
                        for ic in range(c):
                            for j in range(m):
                                xsel[ic, i * m + j] = x[nb, ic, tt, j]
                    else:
                        for ic in range(c):
                            for j in range(m):
                                xsel[ic, i * m + j] = 0.0
                yk = np.dot(wk, xsel)  # (o, to*m)
                for oc in range(o):
                    for i in range(to):
                        if not valid[i]:
                            continue
                        for j in range(m):
                            y[nb, oc, i, j] += yk[oc, i * m + j]
        return y

    @njit(cache=True)
    def nb_conv1d_bwd_x(gy, w, stride, pad, t):
        b, o, to, m = gy.shape
        c, kt = w.shape[1], w.shape[2]
        gx = np.zeros((b, c, t, m))
        gy2 = np.empty((o, to * m))
        for nb in range(b):
            for oc in range(o):
                for i in range(to):
                    for j in range(m):
                        gy2[oc, i * m + j] = gy[nb, oc, i, j]
            for k in range(kt):
                wkt = np.ascontiguousarray(w[:, :, k].T)
                gk = np.dot(wkt, gy2)  # (c, to*m)
                for i in range(to):
                    tt = i * stride + k - pad
                    if tt < 0 or tt >= t:
                        continue
                    for ic in range(c):
                        for j in range(m):
                            gx[nb, ic, tt, j] += gk[ic, i * m + j]
        return gx

    @njit(cache=True)
    def nb_conv1d_bwd_w(gy, x, stride, pad, kt):
        b, o, to, m = gy.shape
        c, t = x.shape[1], x.shape[2]
        gw = np.zeros((o, c, kt))
        gy2 = np.empty((o, to * m))
        xselt = np.empty((to * m, c))
        for nb in range(b):
            for oc in range(o):
                for i in range(to):
                    for j in range(m):
                        gy2[oc, i * m + j] = gy[nb, oc, i, j]
            for k in range(kt):
                for i in range(to):
                    tt = i * stride + k - pad
                    for ic in range(c):
                        if 0 <= tt < t:
                            for j in range(m):
                                xselt[i * m + j, ic] = x[nb, ic, tt, j]
                        else:
                            for j in range(m):
                                xselt[i * m + j, ic] = 0.0
                gw[:, :, k] += np.dot(gy2, xselt)
        return gw

    return {
        "conv2d_fwd": nb_conv2d_fwd,
        "conv2d_bwd_x": nb_conv2d_bwd_x,
        "conv2d_bwd_w": nb_conv2d_bwd_w,
        "conv1d_fwd": nb_conv1d_fwd,
        "conv1d_bwd_x": nb_conv1d_bwd_x,
        "conv1d_bwd_w": nb_conv1d_bwd_w,
    }


def _want_numba():
    flag = os.environ.get("STICA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_NUMBA = None
if _want_numba():
    try:
        _NUMBA = _build_numba()
    except ImportError:
        _NUMBA = None

BACKEND = "numba" if _NUMBA is not None else "numpy"


def _as_c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_fwd(x, w, stride, pad):
    if _NUMBA is not None:
        ho = conv_out_len(x.shape[2], w.shape[2], stride, pad)
        wo = conv_out_len(x.shape[3], w.shape[3], stride, pad)
        return _NUMBA["conv2d_fwd"](_as_c64(x), _as_c64(w), stride, pad, ho, wo)
    return _np_conv2d_fwd(x, w, stride, pad)


def conv2d_bwd_x(gy, w, stride, pad, h, wid):
    if _NUMBA is not None:
        return _NUMBA["conv2d_bwd_x"](_as_c64(gy), _as_c64(w), stride, pad, h, wid)
    return _np_conv2d_bwd_x(gy, w, stride, pad, h, wid)


def conv2d_bwd_w(gy, x, stride, pad, kh, kw):
    if _NUMBA is not None:
        return _NUMBA["conv2d_bwd_w"](_as_c64(gy), _as_c64(x), stride, pad, kh, kw)
    return _np_conv2d_bwd_w(gy, x, stride, pad, kh, kw)


def conv1d_fwd(x, w, stride, pad):
    if _NUMBA is not None:
        to = conv_out_len(x.shape[2], w.shape[2], stride, pad)
        return _NUMBA["conv1d_fwd"](_as_c64(x), _as_c64(w), stride, pad, to)
    return _np_conv1d_fwd(x, w, stride, pad)


def conv1d_bwd_x(gy, w, stride, pad, t):
    if _NUMBA is not None:
        return _NUMBA["conv1d_bwd_x"](_as_c64(gy), _as_c64(w), stride, pad, t)
    return _np_conv1d_bwd_x(gy, w, stride, pad, t)


def conv1d_bwd_w(gy, x, stride, pad, kt):
    if _NUMBA is not None:
        return _NUMBA["conv1d_bwd_w"](_as_c64(gy), _as_c64(x), stride, pad, kt)
    return _np_conv1d_bwd_w(gy, x, stride, pad, kt)


# pure-numpy implementations, importable regardless of the selected backend
numpy_impls = {
    "conv2d_fwd": _np_conv2d_fwd,
    "conv2d_bwd_x": _np_conv2d_bwd_x,
    "conv2d_bwd_w": _np_conv2d_bwd_w,
    "conv1d_fwd": _np_conv1d_fwd,
    "conv1d_bwd_x": _np_conv1d_bwd_x,
    "conv1d_bwd_w": _np_conv1d_bwd_w,
}
