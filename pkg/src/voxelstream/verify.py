"""Finite-difference verification of every differentiable operation.

Elementwise central-difference checks cover each op in isolation (gradients
with respect to every input that carries one). Full-model losses are checked
with directional derivatives: a random unit direction over all parameters
jointly, so one probe validates the entire backward graph. Everything runs
in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .networks import NetworkSpec, build_model
from .ops3d import (ConvSpec, conv3d, deconv3d, maxpool3d, softmax_cross_entropy,
                    voxel_flow_loss)
from .tensor import (Tape, Tensor, add, channel_concat, grad_check, linear, mul,
                     relu, reshape, scale, tensor_sum)

TOLERANCE = 1e-4

# micro network used for the whole-variant checks: tiny widths, 2 pool stages
MICRO = dict(num_classes=3, clip=(3, 4, 8, 8), width_factor=1 / 32,
             pooling=((1, 2, 2), (2, 2, 2), None, None, None))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return x + margin * np.sign(x)


def _distinct(rng, shape):
    """Values with pairwise gaps far above the probe step (argmax stability)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) / n).reshape(shape) * 4.0 - 2.0


def _proj(rng, shape) -> Tensor:
    """Fixed random projection so scalarized outputs keep rich gradients."""
    return Tensor(rng.standard_normal(shape))


def _sum_proj(out: Tensor, c: Tensor) -> Tensor:
    return tensor_sum(mul(out, c))


def _elementwise_checks(rng):
    checks = []
    x34 = _away_from_zero(rng, (3, 4))

    checks.append(("relu", lambda: grad_check(
        lambda t: _sum_proj(relu(t), _proj(np.random.default_rng(1), (3, 4))),
        Tensor(x34))))

    a = Tensor(rng.standard_normal((2, 5)))
    b = Tensor(rng.standard_normal((2, 5)))
    c = _proj(rng, (2, 5))
    checks.append(("add", lambda: grad_check(
        lambda t: _sum_proj(add(t, b), c), a)))
    checks.append(("mul", lambda: grad_check(
        lambda t: _sum_proj(mul(t, b), c), a)))
    checks.append(("scale", lambda: grad_check(
        lambda t: _sum_proj(scale(t, -1.7), c), a)))
    checks.append(("sum", lambda: grad_check(lambda t: tensor_sum(t), a)))
    checks.append(("reshape", lambda: grad_check(
        lambda t: _sum_proj(reshape(t, (5, 2)), _proj(np.random.default_rng(2), (5, 2))), a)))

    ca = Tensor(rng.standard_normal((2, 3, 4)))
    cb = Tensor(rng.standard_normal((2, 5, 4)))
    cc = _proj(rng, (2, 8, 4))
    checks.append(("concat.a", lambda: grad_check(
        lambda t: _sum_proj(channel_concat(t, cb), cc), ca)))
    checks.append(("concat.b", lambda: grad_check(
        lambda t: _sum_proj(channel_concat(ca, t), cc), cb)))

    lx = Tensor(rng.standard_normal((3, 6)))
    lw = Tensor(rng.standard_normal((4, 6)) * 0.5)
    lb = Tensor(rng.standard_normal((4,)))
    lc = _proj(rng, (3, 4))
    checks.append(("linear.x", lambda: grad_check(
        lambda t: _sum_proj(linear(t, lw, lb), lc), lx)))
    checks.append(("linear.w", lambda: grad_check(
        lambda t: _sum_proj(linear(lx, t, lb), lc), lw)))
    checks.append(("linear.b", lambda: grad_check(
        lambda t: _sum_proj(linear(lx, lw, t), lc), lb)))
    return checks


def _conv_checks(rng):
    checks = []
    cases = [
        ("s1", ConvSpec(3, 4, (3, 3, 3), (1, 1, 1), (1, 1, 1)), (2, 3, 4, 6, 6)),
        ("s2", ConvSpec(2, 3, (2, 3, 3), (1, 2, 2), (0, 1, 1)), (2, 2, 3, 7, 7)),
    ]
    for tag, spec, xshape in cases:
        x = Tensor(rng.standard_normal(xshape))
        w = Tensor(rng.standard_normal((spec.out_channels, spec.in_channels) + spec.kernel) * 0.4)
        b = Tensor(rng.standard_normal((spec.out_channels,)))
        from .ops3d import conv_output_shape
        oshape = (xshape[0], spec.out_channels) + conv_output_shape(xshape[2:], spec)
        c = _proj(rng, oshape)
        checks.append((f"conv3d.{tag}.x", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(conv3d(t, w, b, spec), c), x)))
        checks.append((f"conv3d.{tag}.w", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(conv3d(x, t, b, spec), c), w)))
        checks.append((f"conv3d.{tag}.b", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(conv3d(x, w, t, spec), c), b)))

    dcases = [
        ("s1", ConvSpec(3, 2, (3, 3, 3), (1, 1, 1), (1, 1, 1)), (2, 3, 3, 5, 5)),
        ("s2", ConvSpec(2, 3, (2, 2, 2), (2, 2, 2), (0, 0, 0)), (2, 2, 2, 3, 3)),
    ]
    for tag, spec, xshape in dcases:
        x = Tensor(rng.standard_normal(xshape))
        w = Tensor(rng.standard_normal((spec.in_channels, spec.out_channels) + spec.kernel) * 0.4)
        b = Tensor(rng.standard_normal((spec.out_channels,)))
        from .ops3d import deconv_output_shape
        oshape = (xshape[0], spec.out_channels) + deconv_output_shape(xshape[2:], spec)
        c = _proj(rng, oshape)
        checks.append((f"deconv3d.{tag}.x", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(deconv3d(t, w, b, spec), c), x)))
        checks.append((f"deconv3d.{tag}.w", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(deconv3d(x, t, b, spec), c), w)))
        checks.append((f"deconv3d.{tag}.b", lambda x=x, w=w, b=b, spec=spec, c=c: grad_check(
            lambda t: _sum_proj(deconv3d(x, w, t, spec), c), b)))
    return checks


def _pool_and_loss_checks(rng):
    checks = []
    px = Tensor(_distinct(rng, (2, 2, 4, 6, 6)))
    pc = _proj(rng, (2, 2, 2, 3, 3))
    checks.append(("maxpool3d.routing", lambda: grad_check(
        lambda t: _sum_proj(maxpool3d(t, (2, 2, 2), (2, 2, 2)), pc), px)))

    logits = Tensor(rng.standard_normal((4, 5)))
    labels = np.array([0, 3, 2, 4])
    checks.append(("softmax_cross_entropy", lambda: grad_check(
        lambda t: softmax_cross_entropy(t, labels), logits)))

    pred = Tensor(rng.standard_normal((2, 2, 3, 4, 4)))
    gt = Tensor(rng.standard_normal((2, 2, 3, 4, 4)) * 0.5)
    checks.append(("voxel_flow_loss", lambda: grad_check(
        lambda t: voxel_flow_loss(t, gt)[0], pred)))
    return checks


def _directional_check(loss_fn, params, rng, n_dirs=4, eps=1e-6) -> float:
    """Compares tape gradients against central differences along random
    unit directions spanning all parameters at once."""
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss, params=params)
    grads = [p.grad.copy() for p in params]

    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        for p, d in zip(params, dirs):
            p.data += eps * d
        hi = loss_fn().item()
        for p, d in zip(params, dirs):
            p.data -= 2 * eps * d
        lo = loss_fn().item()
        for p, d in zip(params, dirs):
            p.data += eps * d
        numeric = (hi - lo) / (2 * eps)
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, rel)
    return worst


def _variant_checks(rng):
    checks = []
    for variant in ("initial", "combined", "twostream"):
        def run(variant=variant):
            spec = NetworkSpec(**MICRO)
            model = build_model(variant, spec, seed=11, dtype=np.float64)
            # jitter every parameter: fresh models have zero biases, which
            # parks many pre-activations exactly on the relu kink where
            # central differences and subgradients legitimately disagree
            jitter = np.random.default_rng(101)
            for p in model.parameters().values():
                p.data += jitter.normal(0.0, 0.05, size=p.shape)
            clips = Tensor(rng.random((2,) + tuple(spec.clip)))
            gt = Tensor(rng.standard_normal((2, 2, spec.clip[1] - 1) + tuple(spec.clip[2:])))
            labels = np.array([0, 1])

            def total_loss():
                out = model.forward(clips, with_flow=True)
                ce = softmax_cross_entropy(out.logits, labels)
                fl, _ = voxel_flow_loss(out.flow, gt)
                return add(ce, scale(fl, 0.7))

            params = list(model.parameters().values())
            return _directional_check(total_loss, params, rng)
        checks.append((f"variant_total_loss.{variant}", run))
    return checks


def run_gradient_suite(seed: int = 0, tolerance: float = TOLERANCE, log=None):
    """Runs every check; returns a CheckResult list (order is fixed)."""
    if tolerance <= 0:
        raise ContractError(f"tolerance must be positive, got {tolerance}")
    rng = np.random.default_rng(seed)
    checks = (_elementwise_checks(rng) + _conv_checks(rng)
              + _pool_and_loss_checks(rng) + _variant_checks(rng))
    results = []
    for name, fn in checks:
        err = float(fn())
        result = CheckResult(name, err, tolerance)
        results.append(result)
        if log is not None:
            log(f"{'PASS' if result.ok else 'FAIL'} {name}: max rel err {err:.3e}")
    return results
