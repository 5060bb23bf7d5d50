"""Dense rank-<=5 tensors with reverse-mode differentiation.

The design is define-by-run: ops execute eagerly on numpy arrays and, when a
``Tape`` is active, append a backward rule to it. Calling ``backward`` walks
the tape in reverse, accumulating gradients into each tensor's ``grad``
buffer. The tape is rebuilt on every forward pass, which lets the three
model variants share layers freely without a static graph.

Axis convention for rank-5 tensors is (N, C, T, H, W): batch, channel,
time, height, width. Training runs at float32; gradient verification runs
at float64 (finite differences are unreliable at single precision).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ContractError, ShapeError
from .profiling import count_op

MAX_RANK = 5


def _validate_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds maximum {MAX_RANK}: {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


class Tensor:
    """A dense float array plus an optional gradient buffer.

    ``data`` is immutable by convention after construction (optimisers
    mutate parameter data in place, but never mid-forward-pass), which makes
    read-only sharing safe. ``grad`` is populated by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)  # row-major data invariant
        _validate_shape(arr.shape)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _TapeRecord:
    __slots__ = ("input_ids", "output", "backward_fn")

    def __init__(self, input_ids, output, backward_fn):
        self.input_ids = input_ids
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; replayed in reverse for gradients.

    Records are appended in execution order, so inputs always precede the
    ops that consume them and a single reverse sweep visits every node once,
    summing gradients from multiple consumers.
    """

    def __init__(self):
        self._records: list[_TapeRecord] = []
        self._next_id = 0

    def __len__(self):
        return len(self._records)

    def _register(self, t: Tensor) -> int:
        if t.node_id is None:
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, inputs: Iterable[Tensor], output: Tensor, backward_fn) -> None:
        """backward_fn(grad_out) must return a list of (tensor, grad) pairs."""
        ids = tuple(self._register(t) for t in inputs)
        self._register(output)
        self._records.append(_TapeRecord(ids, output, backward_fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Gradients sum into any pre-existing ``grad`` arrays, so callers
        reusing tensors across calls must reset grads (``grad = None``) first.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = rec.output.grad
            if g is None:
                continue
            for t, gt in rec.backward_fn(g):
                if t.grad is None:
                    t.grad = gt
                else:
                    t.grad += gt
        # Parameters never reached from the loss still get a well-defined
        # (zero) gradient so the optimiser can treat all params uniformly.
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Optional[Tape]] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording even if a tape is active (inference, detached taps)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def record_op(inputs, output, backward_fn) -> Tensor:
    """Attach a backward rule to the active tape, if recording applies.

    Outside a tape (or under ``no_grad``) the output is detached: gradient
    does not flow through it even if it later feeds a recorded op.
    """
    tape = active_tape()
    output.requires_grad = (tape is not None) and any(t.requires_grad for t in inputs)
    if output.requires_grad:
        tape.record(inputs, output, backward_fn)
    return output


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` for every tensor reachable backward from ``loss``."""
    tape.backward(loss, params)


# ---------------------------------------------------------------------------
# Construction


def he_std(fan_in: int) -> float:
    """Fan-in scaled init std for ReLU stacks."""
    return math.sqrt(2.0 / fan_in)


def tensor_new(shape, fill=0.0, *, seed=None, std=1.0, dtype=np.float32,
               requires_grad=False) -> Tensor:
    """Create a tensor filled with a constant or seeded zero-mean normals.

    ``fill`` is either a scalar or the string ``"normal"``; the normal fill
    requires an explicit ``seed`` so results are reproducible byte-for-byte.
    """
    shape = _validate_shape(shape)
    if fill == "normal":
        if seed is None:
            raise ContractError("random fill requires an explicit seed")
        rng = np.random.Generator(np.random.PCG64(seed))
        data = rng.normal(0.0, std, size=shape).astype(dtype)
    else:
        data = np.full(shape, float(fill), dtype=dtype)
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)

    def bwd(g):
        grads = []
        if x.requires_grad:
            grads.append((x, g.copy()))
        if y.requires_grad:
            grads.append((y, g.copy()))
        return grads

    return record_op((x, y), out, bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"mul shape mismatch: {x.shape} vs {y.shape}")
    out = Tensor(x.data * y.data)

    def bwd(g):
        grads = []
        if x.requires_grad:
            grads.append((x, g * y.data))
        if y.requires_grad:
            grads.append((y, g * x.data))
        return grads

    return record_op((x, y), out, bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s)

    def bwd(g):
        return [(x, g * s)] if x.requires_grad else []

    return record_op((x,), out, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        return [(x, np.full(x.shape, g[()], dtype=x.dtype))] if x.requires_grad else []

    return record_op((x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = _validate_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        # copy: reshape may return a view aliasing the consumer's grad buffer
        return [(x, g.reshape(x.shape).copy())] if x.requires_grad else []

    return record_op((x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        # subgradient at exactly 0 is defined as 0 for determinism
        return [(x, g * (x.data > 0))] if x.requires_grad else []

    return record_op((x,), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out = x @ w.T + b for x (N, D_in), w (D_out, D_in), b (D_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear needs rank-2 x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear inner-dim mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} does not match w {w.shape}")
    count_op("linear")
    out = Tensor(x.data @ w.data.T + b.data)

    def bwd(g):
        grads = []
        if x.requires_grad:
            grads.append((x, g @ w.data))
        if w.requires_grad:
            grads.append((w, g.T @ x.data))
        if b.requires_grad:
            grads.append((b, g.sum(axis=0)))
        return grads

    return record_op((x, w, b), out, bwd)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel/feature axis (axis 1); a's channels first."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    for ax in range(a.data.ndim):
        if ax != 1 and a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat non-channel axis {ax} differs: {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd(g):
        grads = []
        if a.requires_grad:
            grads.append((a, g[:, :split].copy()))
        if b.requires_grad:
            grads.append((b, g[:, split:].copy()))
        return grads

    return record_op((a, b), out, bwd)


# ---------------------------------------------------------------------------
# Verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and deterministic; ``x`` must be float64.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps must be in [1e-7, 1e-3], got {eps}")
    if x.dtype != np.float64:
        raise ContractError("grad_check requires a float64 input tensor")

    xv = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xv)
        if y.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        backward(y, tape, params=[xv])
    analytic = xv.grad.reshape(-1)

    flat = x.data.copy().reshape(-1)
    numeric = np.empty_like(flat)
    probe = Tensor(flat.reshape(x.shape))
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(probe).item()
            flat[i] = orig - eps
            lo = f(probe).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
