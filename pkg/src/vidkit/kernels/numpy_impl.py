"""Pure-numpy convolution / pooling kernels.

Fallback path used when VIDKIT_NUMBA=0 or numba is unavailable. All arrays
are float64, NCHW layout. Conv weights are (Cout, Cin, K, K); transposed-conv
weights are (Cin, Cout, K, K).
"""

import numpy as np


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, b, stride, pad):
    n, cin, hin, win = x.shape
    cout, _, k, _ = w.shape
    hout = (hin + 2 * pad - k) // stride + 1
    wout = (win + 2 * pad - k) // stride + 1
    xp = _pad(x, pad)
    y = np.zeros((n, cout, hout, wout))
    for kh in range(k):
        for kw in range(k):
            xs = xp[:, :, kh : kh + hout * stride : stride, kw : kw + wout * stride : stride]
            # (n, cin, hout, wout) x (cout, cin) -> (n, hout, wout, cout)
            y += np.tensordot(xs, w[:, :, kh, kw], axes=([1], [1])).transpose(0, 3, 1, 2)
    return y + b[None, :, None, None]


def conv2d_backward(x, w, gy, stride, pad):
    n, cin, hin, win = x.shape
    cout, _, k, _ = w.shape
    _, _, hout, wout = gy.shape
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for kh in range(k):
        for kw in range(k):
            xs = xp[:, :, kh : kh + hout * stride : stride, kw : kw + wout * stride : stride]
            gw[:, :, kh, kw] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
            gxp[:, :, kh : kh + hout * stride : stride, kw : kw + wout * stride : stride] += (
                np.tensordot(gy, w[:, :, kh, kw], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad : pad + hin, pad : pad + win] if pad else gxp
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb


def convt2d_forward(x, w, b, stride, pad):
    n, cin, hin, win = x.shape
    _, cout, k, _ = w.shape
    hfull = (hin - 1) * stride + k
    wfull = (win - 1) * stride + k
    yf = np.zeros((n, cout, hfull, wfull))
    for kh in range(k):
        for kw in range(k):
            # scatter: y[.., ih*stride+kh, iw*stride+kw] += x . w
            yf[:, :, kh : kh + hin * stride : stride, kw : kw + win * stride : stride] += (
                np.tensordot(x, w[:, :, kh, kw], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
    y = yf[:, :, pad : hfull - pad, pad : wfull - pad] if pad else yf
    return y + b[None, :, None, None]


def convt2d_backward(x, w, gy, stride, pad):
    n, cin, hin, win = x.shape
    _, cout, k, _ = w.shape
    hfull = (hin - 1) * stride + k
    wfull = (win - 1) * stride + k
    gyf = np.zeros((n, cout, hfull, wfull))
    if pad:
        gyf[:, :, pad : hfull - pad, pad : wfull - pad] = gy
    else:
        gyf = gy.astype(np.float64, copy=True)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for kh in range(k):
        for kw in range(k):
            gys = gyf[:, :, kh : kh + hin * stride : stride, kw : kw + win * stride : stride]
            gx += np.tensordot(gys, w[:, :, kh, kw], axes=([1], [1])).transpose(0, 3, 1, 2)
            gw[:, :, kh, kw] = np.tensordot(x, gys, axes=([0, 2, 3], [0, 2, 3]))
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb


def maxpool2d_forward(x, k, stride):
    n, c, hin, win = x.shape
    hout = (hin - k) // stride + 1
    wout = (win - k) // stride + 1
    y = np.full((n, c, hout, wout), -np.inf)
    idx = np.zeros((n, c, hout, wout), dtype=np.int64)
    for kh in range(k):
        for kw in range(k):
            xs = x[:, :, kh : kh + hout * stride : stride, kw : kw + wout * stride : stride]
            take = xs > y
            y = np.where(take, xs, y)
            oh = np.arange(hout)[:, None] * stride + kh
            ow = np.arange(wout)[None, :] * stride + kw
            flat = (oh * win + ow)[None, None]
            idx = np.where(take, flat, idx)
    return y, idx


def maxpool2d_backward(gy, idx, x_shape):
    n, c, hin, win = x_shape
    gx = np.zeros((n, c, hin * win))
    np.add.at(
        gx,
        (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], idx),
        gy,
    )
    return gx.reshape(x_shape)
