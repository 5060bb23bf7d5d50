"""Spatio-temporal kernels: 3D convolution, transposed convolution, max
pooling, and the two training losses.

Convolution is implemented as cross-correlation (no kernel flip), the modern
CNN convention. The forward paths gather strided windows and contract them
with the weights via ``tensordot``; the transposed paths scatter-add one
vectorised slab per kernel offset, so the only Python-level loop is over the
k_t*k_h*k_w kernel positions. ``deconv3d`` is the exact adjoint of
``conv3d`` under matching stride/padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidSpecError, ShapeError
from .profiling import count_op
from .tensor import Tensor, record_op


@dataclass(frozen=True)
class ConvSpec:
    """Layer geometry for conv3d/deconv3d."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidSpecError(f"channel counts must be >= 1, got {self}")
        for name in ("kernel", "stride", "padding"):
            v = getattr(self, name)
            if len(v) != 3:
                raise InvalidSpecError(f"{name} must have 3 extents, got {v}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise InvalidSpecError(f"kernel and stride extents must be >= 1: {self}")
        if any(p < 0 or p >= k for p, k in zip(self.padding, self.kernel)):
            raise InvalidSpecError(
                f"padding must satisfy 0 <= p < kernel, got padding {self.padding} "
                f"for kernel {self.kernel}")


def conv_output_shape(spatial, spec: ConvSpec) -> tuple:
    """floor((in + 2p - k)/s) + 1 per axis; must stay >= 1."""
    out = tuple(
        (i + 2 * p - k) // s + 1
        for i, k, s, p in zip(spatial, spec.kernel, spec.stride, spec.padding))
    if any(o < 1 for o in out):
        raise InvalidSpecError(
            f"conv output collapses to {out} for input {tuple(spatial)} with {spec}")
    return out


def deconv_output_shape(spatial, spec: ConvSpec) -> tuple:
    """(in - 1)*s - 2p + k per axis; must stay >= 1."""
    out = tuple(
        (i - 1) * s - 2 * p + k
        for i, k, s, p in zip(spatial, spec.kernel, spec.stride, spec.padding))
    if any(o < 1 for o in out):
        raise InvalidSpecError(
            f"deconv output collapses to {out} for input {tuple(spatial)} with {spec}")
    return out


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, kernel, stride) -> np.ndarray:
    """Strided windows (N, C, T', H', W', k_t, k_h, k_w) over a padded input."""
    st, sh, sw = stride
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return v[:, :, ::st, ::sh, ::sw]


def _gather(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    """Correlate windows of xp (N,C,...) with w (C_out, C, k...) -> (N, C_out, ...)."""
    win = _windows(xp, w.shape[2:], stride)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.moveaxis(out, 4, 1)


def _scatter(y: np.ndarray, w: np.ndarray, stride, padding, out_spatial) -> np.ndarray:
    """Adjoint of ``_gather``: spread y (N, C_y, ...) through w (C_y, C_x, k...)."""
    st, sh, sw = stride
    pt, ph, pw = padding
    kt, kh, kw = w.shape[2:]
    n = y.shape[0]
    ot, oh, ow = out_spatial
    tp, hp, wp = y.shape[2:]
    full = np.zeros((n, w.shape[1], ot + 2 * pt, oh + 2 * ph, ow + 2 * pw), dtype=y.dtype)
    contrib = np.tensordot(y, w, axes=([1], [0]))       # (N, T', H', W', C_x, k...)
    contrib = np.moveaxis(contrib, 4, 1)                # (N, C_x, T', H', W', k...)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                full[:, :,
                     i:i + st * (tp - 1) + 1:st,
                     j:j + sh * (hp - 1) + 1:sh,
                     k:k + sw * (wp - 1) + 1:sw] += contrib[..., i, j, k]
    if pt or ph or pw:
        full = full[:, :, pt:pt + ot, ph:ph + oh, pw:pw + ow]
    return full


def _grad_weight(gout: np.ndarray, xp: np.ndarray, kernel, stride) -> np.ndarray:
    """d(gather)/dw: correlate input windows with the output gradient."""
    win = _windows(xp, kernel, stride)
    return np.tensordot(gout, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv3d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """Strided zero-padded cross-correlation over (T, H, W).

    x: (N, C_in, T, H, W); w: (C_out, C_in, k_t, k_h, k_w); b: (C_out,).
    """
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5, got {x.shape}")
    expect_w = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
    if w.shape != expect_w:
        raise ShapeError(f"conv3d weight shape {w.shape} does not match spec {expect_w}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv3d input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d bias shape {b.shape}, expected ({spec.out_channels},)")
    conv_output_shape(x.shape[2:], spec)

    count_op("conv3d")
    xp = _pad_spatial(x.data, spec.padding)
    out = _gather(xp, w.data, spec.stride)
    out += b.data[None, :, None, None, None]
    out_t = Tensor(out)

    def bwd(g):
        grads = []
        if x.requires_grad:
            gx = _scatter(g, w.data, spec.stride, spec.padding, x.shape[2:])
            grads.append((x, gx))
        if w.requires_grad:
            grads.append((w, _grad_weight(g, xp, spec.kernel, spec.stride)))
        if b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3, 4))))
        return grads

    return record_op((x, w, b), out_t, bwd)


def deconv3d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed (adjoint) strided convolution; upsamples by the stride.

    x: (N, C_in, T, H, W); w: (C_in, C_out, k_t, k_h, k_w); b: (C_out,).
    """
    if x.data.ndim != 5:
        raise ShapeError(f"deconv3d input must be rank 5, got {x.shape}")
    expect_w = (spec.in_channels, spec.out_channels) + tuple(spec.kernel)
    if w.shape != expect_w:
        raise ShapeError(f"deconv3d weight shape {w.shape} does not match spec {expect_w}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"deconv3d input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"deconv3d bias shape {b.shape}, expected ({spec.out_channels},)")
    out_spatial = deconv_output_shape(x.shape[2:], spec)

    count_op("deconv3d")
    out = _scatter(x.data, w.data, spec.stride, spec.padding, out_spatial)
    out += b.data[None, :, None, None, None]
    out_t = Tensor(out)

    def bwd(g):
        grads = []
        gp = None
        if x.requires_grad or w.requires_grad:
            gp = _pad_spatial(g, spec.padding)
        if x.requires_grad:
            grads.append((x, _gather(gp, w.data, spec.stride)))
        if w.requires_grad:
            # same window contraction as conv grad_w, with x in the gout role
            grads.append((w, _grad_weight(x.data, gp, spec.kernel, spec.stride)))
        if b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3, 4))))
        return grads

    return record_op((x, w, b), out_t, bwd)


def maxpool3d(x: Tensor, window, stride) -> Tensor:
    """Max over sliding windows; gradient routes to the argmax voxel.

    Ties break toward the first voxel in row-major scan order within the
    window (numpy argmax convention).
    """
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d input must be rank 5, got {x.shape}")
    window = tuple(int(v) for v in window)
    stride = tuple(int(v) for v in stride)
    if any(v < 1 for v in window + stride):
        raise InvalidSpecError(f"window and stride must be >= 1: {window}, {stride}")
    spatial = x.shape[2:]
    if any(w > i for w, i in zip(window, spatial)):
        raise InvalidSpecError(f"pool window {window} larger than input {spatial}")
    out_spatial = tuple((i - w) // s + 1 for i, w, s in zip(spatial, window, stride))
    if any(o < 1 for o in out_spatial):
        raise InvalidSpecError(f"pool output collapses to {out_spatial}")

    count_op("maxpool3d")
    win = _windows(x.data, window, stride)
    n, c = x.shape[:2]
    flat = win.reshape(win.shape[:5] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_t = Tensor(out)

    def bwd(g):
        if not x.requires_grad:
            return []
        gi, gj, gk = np.unravel_index(arg, window)
        ni, ci, ti, hi, wi = np.indices(arg.shape, sparse=True)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci,
                       ti * stride[0] + gi,
                       hi * stride[1] + gj,
                       wi * stride[2] + gk), g)
        return [(x, gx)]

    return record_op((x,), out_t, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilised."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    count_op("softmax_cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(g):
        if not logits.requires_grad:
            return []
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        return [(logits, soft * (g[()] / n))]

    return record_op((logits,), out, bwd)


def voxel_flow_loss(pred: Tensor, gt: Tensor):
    """Voxel-wise squared error on a 2-channel flow field, plus the EPE metric.

    Returns ``(loss, epe)``: loss is the differentiable mean over voxels of
    the squared error summed across the (u, v) channels; epe is the plain
    mean Euclidean endpoint error per voxel, reported but not differentiated.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"flow shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.data.ndim != 5 or pred.shape[1] != 2:
        raise ShapeError(f"flow fields must be (N, 2, T-1, H, W), got {pred.shape}")

    count_op("voxel_flow_loss")
    diff = pred.data - gt.data
    n_voxels = pred.size // 2
    loss = Tensor(np.asarray((diff * diff).sum() / n_voxels, dtype=pred.dtype))
    epe = float(np.sqrt((diff * diff).sum(axis=1)).mean())

    def bwd(g):
        grads = []
        coeff = 2.0 * g[()] / n_voxels
        if pred.requires_grad:
            grads.append((pred, diff * coeff))
        if gt.requires_grad:
            grads.append((gt, diff * (-coeff)))
        return grads

    return record_op((pred, gt), loss, bwd), epe
