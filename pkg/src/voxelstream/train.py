"""Training loop, per-variant schemes, evaluation, and the fps benchmark.

Schemes:
  joint        (combined, twostream) - minimize CE + lambda_flow * flow MSE
               per batch, end to end.
  three_phase  (initial) - phase 1 fits motion encoder + decoder on the flow
               loss alone; phase 2 fits the appearance encoder and head on
               CE with motion features detached; phase 3 refits the head on
               frozen concatenated features.

Each epoch ends with a measurement pass (no gradient recording) over both
splits; the emitted Metrics row is the model state at the end of that epoch.
The fps column is always 0.0 during training so metrics CSVs from
deterministic runs are byte-comparable; real throughput comes from
benchmark_fps.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np
import threadpoolctl

from .data import batch_arrays
from .errors import ContractError, NumericalError
from .ops3d import softmax_cross_entropy, voxel_flow_loss
from .tensor import Tape, Tensor, add, channel_concat, no_grad, scale

METRICS_HEADER = "epoch,cls_loss,flow_mse,flow_epe,train_acc,test_acc,fps"

SCHEMES = ("auto", "joint", "three_phase")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 200
    lambda_flow: float = 1.0
    seed: int = 0
    scheme: str = "auto"
    lr_decay: float = 0.1
    lr_decay_every: int = 80                  # epochs; 0 disables decay
    phase_fractions: tuple = (0.4, 0.4, 0.2)  # three_phase epoch split
    target_train_acc: float = 0.0             # early stop once BOTH targets
    target_train_epe: float = 0.0             # are met; 0/0 disables

    def __post_init__(self):
        if min(self.learning_rate, self.momentum, self.weight_decay,
               self.lambda_flow) < 0:
            raise ContractError("rates and lambda_flow must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("need batch_size >= 1 and epochs >= 1")
        if self.scheme not in SCHEMES:
            raise ContractError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if len(self.phase_fractions) != 3 or min(self.phase_fractions) <= 0:
            raise ContractError("phase_fractions needs 3 positive entries")
        if self.lr_decay <= 0 or self.lr_decay_every < 0:
            raise ContractError("lr_decay must be > 0 and lr_decay_every >= 0")


@dataclass
class Metrics:
    epoch: int
    cls_loss: float
    flow_mse: float
    flow_epe: float
    train_acc: float
    test_acc: float
    fps: float

    def csv_row(self) -> str:
        vals = (self.cls_loss, self.flow_mse, self.flow_epe,
                self.train_acc, self.test_acc, self.fps)
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])


def write_metrics_csv(path: str, history) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for m in history:
            fh.write(m.csv_row() + "\n")


@contextlib.contextmanager
def deterministic_mode():
    """Pins BLAS to one thread so reductions have a fixed evaluation order."""
    with threadpoolctl.threadpool_limits(limits=1):
        yield


def sgd_step(params: dict, grads: dict, state: dict, cfg: TrainConfig) -> dict:
    """v <- mu*v - lr*(g + wd*p); p <- p + v. Mutates params/state in place."""
    lr, mu, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != param {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v - lr * (g + wd * p.data)
        state[name] = v
        p.data += v
    return params


def _resolve_scheme(model, cfg: TrainConfig) -> str:
    if cfg.scheme != "auto":
        return cfg.scheme
    return "three_phase" if model.variant == "initial" else "joint"


def _phase_epochs(cfg: TrainConfig):
    e1 = max(1, round(cfg.phase_fractions[0] * cfg.epochs))
    e2 = max(1, round(cfg.phase_fractions[1] * cfg.epochs))
    e1 = min(e1, max(1, cfg.epochs - 2))
    e2 = min(e2, max(1, cfg.epochs - e1 - 1))
    return e1, e2, max(1, cfg.epochs - e1 - e2)


def _initial_phase(model, epoch: int, bounds) -> int:
    e1, e2, _ = bounds
    if epoch <= e1:
        return 1
    return 2 if epoch <= e1 + e2 else 3


def _phase_params(model, scheme: str, phase: int) -> dict:
    if scheme == "joint":
        return model.parameters()
    all_params = model.parameters()
    prefixes = {1: ("motion.", "decoder."),
                2: ("appearance.", "head."),
                3: ("head.",)}[phase]
    return {k: v for k, v in all_params.items() if k.startswith(prefixes)}


def _batch_loss(model, scheme, phase, clips_t, flows_np, labels, lam, dtype):
    """Forward + loss for one training batch under the active tape."""
    if scheme == "joint":
        out = model.forward(clips_t, with_flow=lam > 0)
        loss = softmax_cross_entropy(out.logits, labels)
        if lam > 0:
            flow_loss, _ = voxel_flow_loss(out.flow, Tensor(flows_np.astype(dtype)))
            loss = add(loss, scale(flow_loss, lam))
        return loss
    if phase == 1:
        conv_map, _ = model.motion.forward(clips_t)
        pred = model.decoder.forward(conv_map)
        loss, _ = voxel_flow_loss(pred, Tensor(flows_np.astype(dtype)))
        return loss
    if phase == 2:
        out = model.forward(clips_t, with_flow=False, detach_motion=True)
        return softmax_cross_entropy(out.logits, labels)
    with no_grad():
        _, app7 = model.appearance.forward(clips_t)
        conv_map, mot7 = model.motion.forward(clips_t)
        feats = channel_concat(app7, model._motion_feature(conv_map, mot7))
    logits = model.head.forward(feats)
    return softmax_cross_entropy(logits, labels)


def _measure(model, clips, flows, labels, batch_size):
    """Post-epoch snapshot over one split: (acc, mean CE, flow MSE, EPE)."""
    n = clips.shape[0]
    correct = 0
    ce_sum = mse_sum = epe_sum = 0.0
    with no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            out = model.forward(Tensor(clips[lo:hi]), with_flow=True)
            lab = labels[lo:hi]
            ce = softmax_cross_entropy(out.logits, lab)
            mse, epe = voxel_flow_loss(out.flow, Tensor(flows[lo:hi]))
            k = hi - lo
            ce_sum += ce.item() * k
            mse_sum += mse.item() * k
            epe_sum += epe * k
            correct += int(np.sum(np.argmax(out.logits.data, axis=1) == lab))
    return correct / n, ce_sum / n, mse_sum / n, epe_sum / n


def train(model, dataset, cfg: TrainConfig, log=None):
    """Runs the variant's scheme over the dataset; returns the Metrics history."""
    if not dataset.train or not dataset.test:
        raise ContractError("train and test splits must both be non-empty")
    dtype = model.dtype
    clips, flows, labels = batch_arrays(dataset.train, dtype)
    test_clips, test_flows, test_labels = batch_arrays(dataset.test, dtype)
    if clips.shape[1:] != tuple(model.spec.clip):
        raise ContractError(
            f"dataset clips {clips.shape[1:]} do not match model spec {model.spec.clip}")

    scheme = _resolve_scheme(model, cfg)
    bounds = _phase_epochs(cfg) if scheme == "three_phase" else None
    rng = np.random.default_rng(cfg.seed)
    velocity: dict = {}
    prev_phase = None
    history = []

    for epoch in range(1, cfg.epochs + 1):
        phase = _initial_phase(model, epoch, bounds) if scheme == "three_phase" else 0
        if phase != prev_phase:
            velocity = {}       # fresh momentum when the trained set changes
            prev_phase = phase
        params = _phase_params(model, scheme, phase)
        decay_steps = (epoch - 1) // cfg.lr_decay_every if cfg.lr_decay_every else 0
        eff = dataclasses.replace(cfg, learning_rate=cfg.learning_rate * cfg.lr_decay ** decay_steps)

        order = rng.permutation(clips.shape[0])
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            clips_t = Tensor(clips[idx])
            model.zero_grad()   # backward accumulates into existing grads
            with Tape() as tape:
                loss = _batch_loss(model, scheme, phase, clips_t, flows[idx],
                                   labels[idx], cfg.lambda_flow, dtype)
                if not math.isfinite(loss.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
                tape.backward(loss, params=params.values())
            grads = {name: p.grad for name, p in params.items()}
            try:
                sgd_step(params, grads, velocity, eff)
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch}, batch {bi}: {err}") from None

        train_acc, ce, mse, epe = _measure(model, clips, flows, labels, cfg.batch_size)
        test_acc, _, _, _ = _measure(model, test_clips, test_flows, test_labels,
                                     cfg.batch_size)
        row = Metrics(epoch, ce, mse, epe, train_acc, test_acc, 0.0)
        history.append(row)
        if log is not None:
            log(row)
        stop_wanted = cfg.target_train_acc > 0 and cfg.target_train_epe > 0
        in_final_phase = scheme == "joint" or phase == 3
        if (stop_wanted and in_final_phase and train_acc >= cfg.target_train_acc
                and epe < cfg.target_train_epe):
            break
    return history


def evaluate(model, samples, batch_size: int = 8):
    """(accuracy, flow EPE) over a sample list, no gradient recording."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    clips, flows, labels = batch_arrays(samples, model.dtype)
    acc, _, _, epe = _measure(model, clips, flows, labels, batch_size)
    return acc, epe


# ---------------------------------------------------------------------------
# Linear classifier on extracted features: one-vs-rest L2-regularized hinge,
# full-batch subgradient descent, zeros init. Deterministic by construction.

@dataclass
class LinearClassifier:
    weights: np.ndarray   # (K, D)
    biases: np.ndarray    # (K,)
    mean: np.ndarray
    std: np.ndarray

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return x @ self.weights.T + self.biases

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=1)   # ties -> lowest index

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def fit_linear_classifier(features, labels, *, epochs: int = 300, lr: float = 0.5,
                          reg: float = 1e-3) -> LinearClassifier:
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    classes = np.unique(y)
    if classes.size < 2:
        raise ContractError(f"need at least 2 classes to fit, got {classes.size}")
    k = int(y.max()) + 1
    if n < k:
        raise ContractError(f"{n} samples cannot cover {k} classes")

    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mean) / std
    targets = np.where(np.arange(k)[None, :] == y[:, None], 1.0, -1.0)   # (N, K)

    w = np.zeros((k, x.shape[1]))
    b = np.zeros(k)
    for step in range(epochs):
        s = xs @ w.T + b
        active = (1.0 - targets * s) > 0
        coeff = np.where(active, targets, 0.0)          # (N, K)
        gw = -(coeff.T @ xs) / n + 2.0 * reg * w
        gb = -coeff.mean(axis=0)
        rate = lr / (1.0 + 0.02 * step)
        w -= rate * gw
        b -= rate * gb
    return LinearClassifier(w, b, mean, std)


# ---------------------------------------------------------------------------
# Throughput.

def inference_forward(model, clips: Tensor, request_flow: bool = False):
    """Test-time forward under the variant's inference policy.

    The initial variant's pipeline computes flow explicitly (its motion
    representation is the output of the flow network), so its decoder always
    runs; combined/twostream skip the decoder unless flow output is requested.
    """
    with_flow = request_flow or model.inference_runs_decoder
    with no_grad():
        return model.forward(clips, with_flow=with_flow)


def benchmark_fps(model, *, batch: int = 2, runs: int = 24, warmup: int = 3,
                  request_flow: bool = False, seed: int = 0) -> float:
    """Median frames-per-second over >= 20 timed inference forwards."""
    if runs < 20:
        raise ContractError(f"need >= 20 timed runs, got {runs}")
    rng = np.random.default_rng(seed)
    clips = Tensor(rng.random((batch,) + tuple(model.spec.clip), dtype=np.float32))
    frames = batch * model.spec.clip[1]
    for _ in range(warmup):
        inference_forward(model, clips, request_flow)
    rates = []
    for _ in range(runs):
        t0 = time.perf_counter()
        inference_forward(model, clips, request_flow)
        rates.append(frames / (time.perf_counter() - t0))
    return float(np.median(rates))
