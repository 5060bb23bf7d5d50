"""Brute-force reference implementations used as test oracles.

Everything here is deliberately written as plain nested loops with scalar
accumulation, independent of the vectorised kernels in ``ops3d`` and
``tensor``. Keep shapes tiny when calling these.
"""

import math

import numpy as np


def linear_naive(x, w, b):
    """Triple-loop x @ w.T + b."""
    n, d_in = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out), dtype=np.float64)
    for i in range(n):
        for o in range(d_out):
            acc = float(b[o])
            for j in range(d_in):
                acc += float(x[i, j]) * float(w[o, j])
            out[i, o] = acc
    return out


def conv3d_naive(x, w, b, stride, padding):
    """Seven-nested-loop strided zero-padded cross-correlation."""
    n, c_in, t, h, wd = x.shape
    c_out, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, c_out, ot, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for to in range(ot):
                for ho in range(oh):
                    for wo in range(ow):
                        acc = float(b[co])
                        for ci in range(c_in):
                            for i in range(kt):
                                for j in range(kh):
                                    for k in range(kw):
                                        ti = to * st + i - pt
                                        hi = ho * sh + j - ph
                                        wi = wo * sw + k - pw
                                        if 0 <= ti < t and 0 <= hi < h and 0 <= wi < wd:
                                            acc += float(x[ni, ci, ti, hi, wi]) * \
                                                   float(w[co, ci, i, j, k])
                        out[ni, co, to, ho, wo] = acc
    return out


def maxpool3d_naive(x, window, stride):
    """Loop max over windows; returns (out, argmax flat indices per window)."""
    n, c, t, h, w = x.shape
    wt, wh, ww = window
    st, sh, sw = stride
    ot = (t - wt) // st + 1
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    out = np.empty((n, c, ot, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for to in range(ot):
                for ho in range(oh):
                    for wo in range(ow):
                        best = -math.inf
                        for i in range(wt):
                            for j in range(wh):
                                for k in range(ww):
                                    v = x[ni, ci, to * st + i, ho * sh + j, wo * sw + k]
                                    if v > best:
                                        best = v
                        out[ni, ci, to, ho, wo] = best
    return out


def cross_entropy_naive(logits, labels):
    """Per-sample -log softmax via math.exp/log."""
    n, k = logits.shape
    total = 0.0
    for i in range(n):
        row = [float(v) for v in logits[i]]
        m = max(row)
        denom = sum(math.exp(v - m) for v in row)
        total += -(row[labels[i]] - m - math.log(denom))
    return total / n


def flow_loss_naive(pred, gt):
    """Scalar-loop squared-error flow loss and endpoint error."""
    n, _, t, h, w = pred.shape
    sq = 0.0
    epe = 0.0
    for ni in range(n):
        for ti in range(t):
            for hi in range(h):
                for wi in range(w):
                    du = float(pred[ni, 0, ti, hi, wi]) - float(gt[ni, 0, ti, hi, wi])
                    dv = float(pred[ni, 1, ti, hi, wi]) - float(gt[ni, 1, ti, hi, wi])
                    sq += du * du + dv * dv
                    epe += math.sqrt(du * du + dv * dv)
    voxels = n * t * h * w
    return sq / voxels, epe / voxels
