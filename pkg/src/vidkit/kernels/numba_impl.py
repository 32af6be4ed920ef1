"""Numba-jitted convolution / pooling kernels (the hot path).

Loop nests accumulate in a fixed order, so results are bitwise reproducible
for a given input. Same signatures as numpy_impl.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, b, stride, pad):
    n, cin, hin, win = x.shape
    cout, _, k, _ = w.shape
    hout = (hin + 2 * pad - k) // stride + 1
    wout = (win + 2 * pad - k) // stride + 1
    y = np.zeros((n, cout, hout, wout))
    for i in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    acc = b[co]
                    for ci in range(cin):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= hin:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if 0 <= iw < win:
                                    acc += x[i, ci, ih, iw] * w[co, ci, kh, kw]
                    y[i, co, oh, ow] = acc
    return y


@njit(cache=True)
def conv2d_backward(x, w, gy, stride, pad):
    n, cin, hin, win = x.shape
    cout, _, k, _ = w.shape
    _, _, hout, wout = gy.shape
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(cout)
    for i in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    g = gy[i, co, oh, ow]
                    gb[co] += g
                    for ci in range(cin):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= hin:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if 0 <= iw < win:
                                    gx[i, ci, ih, iw] += g * w[co, ci, kh, kw]
                                    gw[co, ci, kh, kw] += g * x[i, ci, ih, iw]
    return gx, gw, gb


@njit(cache=True)
def convt2d_forward(x, w, b, stride, pad):
    n, cin, hin, win = x.shape
    _, cout, k, _ = w.shape
    hout = (hin - 1) * stride + k - 2 * pad
    wout = (win - 1) * stride + k - 2 * pad
    y = np.zeros((n, cout, hout, wout))
    for i in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    y[i, co, oh, ow] = b[co]
    for i in range(n):
        for ci in range(cin):
            for ih in range(hin):
                for iw in range(win):
                    v = x[i, ci, ih, iw]
                    for co in range(cout):
                        for kh in range(k):
                            oh = ih * stride + kh - pad
                            if oh < 0 or oh >= hout:
                                continue
                            for kw in range(k):
                                ow = iw * stride + kw - pad
                                if 0 <= ow < wout:
                                    y[i, co, oh, ow] += v * w[ci, co, kh, kw]
    return y


@njit(cache=True)
def convt2d_backward(x, w, gy, stride, pad):
    n, cin, hin, win = x.shape
    _, cout, k, _ = w.shape
    _, _, hout, wout = gy.shape
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(cout)
    for i in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    gb[co] += gy[i, co, oh, ow]
    for i in range(n):
        for ci in range(cin):
            for ih in range(hin):
                for iw in range(win):
                    acc = 0.0
                    for co in range(cout):
                        for kh in range(k):
                            oh = ih * stride + kh - pad
                            if oh < 0 or oh >= hout:
                                continue
                            for kw in range(k):
                                ow = iw * stride + kw - pad
                                if 0 <= ow < wout:
                                    g = gy[i, co, oh, ow]
                                    acc += g * w[ci, co, kh, kw]
                                    gw[ci, co, kh, kw] += g * x[i, ci, ih, iw]
                    gx[i, ci, ih, iw] = acc
    return gx, gw, gb


@njit(cache=True)
def maxpool2d_forward(x, k, stride):
    n, c, hin, win = x.shape
    hout = (hin - k) // stride + 1
    wout = (win - k) // stride + 1
    y = np.zeros((n, c, hout, wout))
    idx = np.zeros((n, c, hout, wout), dtype=np.int64)
    for i in range(n):
        for ci in range(c):
            for oh in range(hout):
                for ow in range(wout):
                    best = -np.inf
                    bi = 0
                    for kh in range(k):
                        for kw in range(k):
                            ih = oh * stride + kh
                            iw = ow * stride + kw
                            v = x[i, ci, ih, iw]
                            if v > best:
                                best = v
                                bi = ih * win + iw
                    y[i, ci, oh, ow] = best
                    idx[i, ci, oh, ow] = bi
    return y, idx


@njit(cache=True)
def maxpool2d_backward(gy, idx, x_shape):
    n, c, hin, win = x_shape
    gx = np.zeros((n, c, hin, win))
    _, _, hout, wout = gy.shape
    for i in range(n):
        for ci in range(c):
            for oh in range(hout):
                for ow in range(wout):
                    f = idx[i, ci, oh, ow]
                    gx[i, ci, f // win, f % win] += gy[i, ci, oh, ow]
    return gx
