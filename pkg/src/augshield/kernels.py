"""Convolution and pooling kernels.

Two interchangeable implementations of every kernel exist: explicit loops that
numba compiles, and a vectorised numpy path (``sliding_window_view`` plus
``tensordot``). ``USE_NUMBA`` picks the one exported under the public names.
Layout is channels-last, ``[B, W, H, C]``; conv weights are ``[k, k, Cin, Cout]``
with stride 1 and "same" zero padding; pooling is 2x2 with stride 2.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import HAVE_NUMBA, njit

USE_NUMBA = HAVE_NUMBA


# --------------------------------------------------------------------- numpy


def conv2d_forward_np(x, w, b):
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # windows: [B, W, H, C, k, k]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    out = np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2]))
    return out + b


def conv2d_backward_np(x, w, gout):
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    # dW[ki,kj,ci,co] = sum_{b,i,j} win[b,i,j,ci,ki,kj] * g[b,i,j,co]
    dw = np.tensordot(win, gout, axes=([0, 1, 2], [0, 1, 2]))  # [C, k, k, Cout]
    dw = dw.transpose(1, 2, 0, 3)
    db = gout.sum(axis=(0, 1, 2))
    gp = np.pad(gout, ((0, 0), (p, p), (p, p), (0, 0)))
    gwin = sliding_window_view(gp, (k, k), axis=(1, 2))  # [B, W, H, Cout, k, k]
    wflip = w[::-1, ::-1]
    dx = np.tensordot(gwin, wflip, axes=([4, 5, 3], [0, 1, 3]))
    return dx, dw, db


def maxpool2_forward_np(x):
    B, W, H, C = x.shape
    v = x.reshape(B, W // 2, 2, H // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    v = v.reshape(B, W // 2, H // 2, C, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward_np(idx, gout, shape):
    B, W, H, C = shape
    onehot = (idx[..., None] == np.arange(4)).astype(gout.dtype) * gout[..., None]
    g = onehot.reshape(B, W // 2, H // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(g.reshape(B, W, H, C))


# --------------------------------------------------------------------- loops


def _conv2d_forward_loops(x, w, b):
    B, W, H, C = x.shape
    k = w.shape[0]
    co_n = w.shape[3]
    p = k // 2
    out = np.empty((B, W, H, co_n))
    for n in range(B):
        for i in range(W):
            for j in range(H):
                for co in range(co_n):
                    out[n, i, j, co] = b[co]
                for ki in range(k):
                    ii = i + ki - p
                    if ii < 0 or ii >= W:
                        continue
                    for kj in range(k):
                        jj = j + kj - p
                        if jj < 0 or jj >= H:
                            continue
                        for ci in range(C):
                            xv = x[n, ii, jj, ci]
                            for co in range(co_n):
                                out[n, i, j, co] += xv * w[ki, kj, ci, co]
    return out


def _conv2d_backward_loops(x, w, gout):
    B, W, H, C = x.shape
    k = w.shape[0]
    co_n = w.shape[3]
    p = k // 2
    dx = np.zeros(x.shape)
    dw = np.zeros(w.shape)
    db = np.zeros(co_n)
    for n in range(B):
        for i in range(W):
            for j in range(H):
                for co in range(co_n):
                    db[co] += gout[n, i, j, co]
                for ki in range(k):
                    ii = i + ki - p
                    if ii < 0 or ii >= W:
                        continue
                    for kj in range(k):
                        jj = j + kj - p
                        if jj < 0 or jj >= H:
                            continue
                        for ci in range(C):
                            xv = x[n, ii, jj, ci]
                            s = 0.0
                            for co in range(co_n):
                                g = gout[n, i, j, co]
                                dw[ki, kj, ci, co] += xv * g
                                s += w[ki, kj, ci, co] * g
                            dx[n, ii, jj, ci] += s
    return dx, dw, db


def _maxpool2_forward_loops(x):
    B, W, H, C = x.shape
    out = np.empty((B, W // 2, H // 2, C))
    idx = np.empty((B, W // 2, H // 2, C), dtype=np.int8)
    for n in range(B):
        for i in range(W // 2):
            for j in range(H // 2):
                for c in range(C):
                    best = x[n, 2 * i, 2 * j, c]
                    arg = 0
                    for q in range(1, 4):
                        v = x[n, 2 * i + q // 2, 2 * j + q % 2, c]
                        if v > best:
                            best = v
                            arg = q
                    out[n, i, j, c] = best
                    idx[n, i, j, c] = arg
    return out, idx


def _maxpool2_backward_loops(idx, gout, dx):
    B, W2, H2, C = gout.shape
    for n in range(B):
        for i in range(W2):
            for j in range(H2):
                for c in range(C):
                    q = idx[n, i, j, c]
                    dx[n, 2 * i + q // 2, 2 * j + q % 2, c] = gout[n, i, j, c]
    return dx


conv2d_forward_nb = njit(_conv2d_forward_loops)
conv2d_backward_nb = njit(_conv2d_backward_loops)
_maxpool2_forward_nb = njit(_maxpool2_forward_loops)
_maxpool2_backward_nb = njit(_maxpool2_backward_loops)


def maxpool2_forward_nb(x):
    return _maxpool2_forward_nb(np.ascontiguousarray(x))


def maxpool2_backward_nb(idx, gout, shape):
    return _maxpool2_backward_nb(idx, np.ascontiguousarray(gout), np.zeros(shape))


if USE_NUMBA:
    def conv2d_forward(x, w, b):
        return conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), b)

    def conv2d_backward(x, w, gout):
        return conv2d_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout)
        )

    maxpool2_forward = maxpool2_forward_nb
    maxpool2_backward = maxpool2_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward = conv2d_backward_np
    maxpool2_forward = maxpool2_forward_np
    maxpool2_backward = maxpool2_backward_np
