"""Synthetic video clips with analytic ground-truth optical flow.

Each clip shows one textured shape (rectangle or disc) translating over a
static noise background. The class label selects the motion program (a
direction angle and speed); appearance draws (shape kind, size, texture,
start position) come from the same distribution for every class, so labels
are recoverable from motion only.

Programs are quantized to integer per-frame displacements, which makes the
frame-to-frame warp an exact pixel shift and the ground-truth flow exact:
flow step t carries (u, v) = the shape's displacement from frame t to t+1
at every pixel of the shape's support at time t, and 0 elsewhere. u is
horizontal (positive rightward), v vertical (positive downward).
"""

from __future__ import annotations

import math
import os
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import fileio
from .errors import FormatError, GenerationError, InvalidSpecError, PairingError

Dataset = namedtuple("Dataset", ["train", "test"])

SHAPE_KINDS = ("rectangle", "disc")


@dataclass
class VideoSample:
    frames: np.ndarray   # (3, T, H, W) float32 in [0, 1]
    flow: np.ndarray     # (2, T-1, H, W) float32, pixels per frame
    label: int

    def __post_init__(self):
        f, g = self.frames, self.flow
        if f.ndim != 4 or f.shape[0] != 3:
            raise InvalidSpecError(f"frames must be (3,T,H,W), got {f.shape}")
        if g.shape != (2, f.shape[1] - 1) + f.shape[2:]:
            raise InvalidSpecError(
                f"flow {g.shape} does not match frames {f.shape} minus one time step")


@dataclass
class SynthConfig:
    num_classes: int = 4
    clips_per_class: int = 22
    frames: int = 8
    height: int = 32
    width: int = 32
    shape_kinds: tuple = SHAPE_KINDS
    motion_programs: tuple = ()      # ((angle_deg, speed_px), ...) per class; empty = evenly spaced directions
    default_speed: float = 2.0
    min_shape: int = 6               # rectangle side / disc diameter lower bound, px
    max_shape: int = 11
    background_level: float = 0.4    # background noise amplitude
    shape_level: float = 0.6         # shape texture lower bound (upper is 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidSpecError(f"need at least 2 classes, got {self.num_classes}")
        if self.clips_per_class < 1 or self.frames < 2:
            raise InvalidSpecError("need clips_per_class >= 1 and frames >= 2")
        if self.seed < 0:
            raise InvalidSpecError(f"seed must be non-negative, got {self.seed}")
        if not 0 < self.min_shape <= self.max_shape:
            raise InvalidSpecError(f"bad shape size range {self.min_shape}..{self.max_shape}")
        if not all(k in SHAPE_KINDS for k in self.shape_kinds) or not self.shape_kinds:
            raise InvalidSpecError(f"shape_kinds must be drawn from {SHAPE_KINDS}")
        if not 0 < self.background_level < self.shape_level <= 1.0:
            raise InvalidSpecError("need 0 < background_level < shape_level <= 1")
        if self.motion_programs and len(self.motion_programs) != self.num_classes:
            raise InvalidSpecError(
                f"{len(self.motion_programs)} motion programs for {self.num_classes} classes")
        if len(set(self.displacements)) != self.num_classes:
            raise InvalidSpecError(
                "motion programs must quantize to distinct per-frame displacements, "
                f"got {self.displacements}")

    @property
    def programs(self) -> tuple:
        """(angle_deg, speed) per class."""
        if self.motion_programs:
            return tuple((float(a), float(s)) for a, s in self.motion_programs)
        step = 360.0 / self.num_classes
        return tuple((k * step, self.default_speed) for k in range(self.num_classes))

    @property
    def displacements(self) -> tuple:
        """Integer per-frame (dx, dy) per class; y axis points down."""
        out = []
        for angle, speed in self.programs:
            rad = math.radians(angle)
            dx, dy = speed * math.cos(rad), speed * math.sin(rad)
            out.append((int(round(dx)), int(round(dy))))
        return tuple(out)

    @property
    def max_speed(self) -> float:
        return max(math.hypot(dx, dy) for dx, dy in self.displacements)


def _draw_shape(rng, cfg):
    """Returns (mask, texture): boolean support and float32 rgb patch."""
    kind = cfg.shape_kinds[rng.integers(0, len(cfg.shape_kinds))]
    if kind == "rectangle":
        sh = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
        sw = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
        mask = np.ones((sh, sw), dtype=bool)
    else:
        r = max(1, int(rng.integers(cfg.min_shape, cfg.max_shape + 1)) // 2)
        d = 2 * r + 1
        yy, xx = np.mgrid[:d, :d]
        mask = (yy - r) ** 2 + (xx - r) ** 2 <= r * r
        sh = sw = d
    texture = rng.uniform(cfg.shape_level, 1.0, size=(3, sh, sw)).astype(np.float32)
    return mask, texture


def make_clip(cfg: SynthConfig, class_idx: int, clip_idx: int) -> VideoSample:
    """One deterministic clip; rng stream keyed by (seed, class, clip)."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, class_idx, clip_idx])))
    t_steps, h, w = cfg.frames, cfg.height, cfg.width
    background = rng.uniform(0.0, cfg.background_level, size=(3, h, w)).astype(np.float32)
    mask, texture = _draw_shape(rng, cfg)
    sh, sw = mask.shape
    dx, dy = cfg.displacements[class_idx]

    travel_x, travel_y = (t_steps - 1) * dx, (t_steps - 1) * dy
    x_lo, x_hi = max(0, -travel_x), w - sw - max(0, travel_x)
    y_lo, y_hi = max(0, -travel_y), h - sh - max(0, travel_y)
    if x_lo > x_hi or y_lo > y_hi:
        raise GenerationError(
            f"class {class_idx}: displacement ({dx},{dy}) over {t_steps} frames drives a "
            f"{sh}x{sw} shape out of the {h}x{w} frame")
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))

    frames = np.empty((3, t_steps, h, w), dtype=np.float32)
    flow = np.zeros((2, t_steps - 1, h, w), dtype=np.float32)
    for t in range(t_steps):
        px, py = x0 + t * dx, y0 + t * dy
        frame = background.copy()
        frame[:, py:py + sh, px:px + sw][:, mask] = texture[:, mask]
        frames[:, t] = frame
        if t < t_steps - 1:
            flow[0, t, py:py + sh, px:px + sw][mask] = dx
            flow[1, t, py:py + sh, px:px + sw][mask] = dy
    return VideoSample(frames, flow, class_idx)


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic train/test split: first 75% of each class's clips train."""
    n_train = (3 * cfg.clips_per_class) // 4
    train, test = [], []
    for class_idx in range(cfg.num_classes):
        for clip_idx in range(cfg.clips_per_class):
            sample = make_clip(cfg, class_idx, clip_idx)
            (train if clip_idx < n_train else test).append(sample)
    return Dataset(train, test)


def batch_arrays(samples, dtype=np.float32):
    """Stack a sample list into (clips, flows, labels) arrays."""
    clips = np.stack([s.frames for s in samples]).astype(dtype)
    flows = np.stack([s.flow for s in samples]).astype(dtype)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return clips, flows, labels


# ---------------------------------------------------------------------------
# Serialization: <stem>.vxt (frames) + <stem>.vxf (flow) + <stem>.lbl (label).

def save_sample(stem: str, sample: VideoSample) -> None:
    fileio.save_tensor(stem + ".vxt", sample.frames)
    fileio.save_flow(stem + ".vxf", sample.flow)
    with open(stem + ".lbl", "w") as fh:
        fh.write(f"{sample.label}\n")


def load_sample(stem: str) -> VideoSample:
    frames = fileio.load_tensor(stem + ".vxt")
    flow = fileio.load_flow(stem + ".vxf")
    with open(stem + ".lbl") as fh:
        text = fh.read().strip()
    try:
        label = int(text)
    except ValueError:
        raise FormatError(f"label sidecar {stem}.lbl holds {text!r}, expected an integer")
    return VideoSample(frames, flow, label)


def save_dataset(dataset: Dataset, root: str) -> None:
    """Writes <root>/<split>/<class_idx>/<clip_idx>.{vxt,vxf,lbl}."""
    for split in ("train", "test"):
        counters = {}
        for sample in getattr(dataset, split):
            idx = counters.get(sample.label, 0)
            counters[sample.label] = idx + 1
            cdir = os.path.join(root, split, str(sample.label))
            os.makedirs(cdir, exist_ok=True)
            save_sample(os.path.join(cdir, f"{idx:03d}"), sample)


def load_split(root: str, split: str):
    """Loads one split, lexicographic over class dirs then clip stems."""
    sdir = os.path.join(root, split)
    if not os.path.isdir(sdir):
        raise FormatError(f"no split directory {sdir}")
    samples = []
    for cname in sorted(os.listdir(sdir)):
        cdir = os.path.join(sdir, cname)
        if not os.path.isdir(cdir):
            continue
        stems = sorted(f[:-4] for f in os.listdir(cdir) if f.endswith(".vxt"))
        for stem in stems:
            samples.append(load_sample(os.path.join(cdir, stem)))
    return samples


def load_dataset(root: str) -> Dataset:
    return Dataset(load_split(root, "train"), load_split(root, "test"))


# ---------------------------------------------------------------------------
# Import path for externally computed flow (one tensor file per frame, one
# flow file per step).

def export_clip(sample: VideoSample, directory: str):
    """Writes per-frame tensors and per-step flow files; returns their paths."""
    frames_dir = os.path.join(directory, "frames")
    flow_dir = os.path.join(directory, "flow")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(flow_dir, exist_ok=True)
    t_steps = sample.frames.shape[1]
    for t in range(t_steps):
        fileio.save_tensor(os.path.join(frames_dir, f"frame_{t:03d}.vxt"),
                           sample.frames[:, t])
    flow_files = []
    for t in range(t_steps - 1):
        path = os.path.join(flow_dir, f"step_{t:03d}.vxf")
        fileio.save_flow(path, sample.flow[:, t:t + 1])
        flow_files.append(path)
    return frames_dir, flow_files


def import_flow(frames_dir: str, flow_files, label: int = 0):
    """Pairs T frame tensors with T-1 single-step flow files into one sample.

    Returns a one-element batch so callers can extend to multi-clip layouts.
    """
    names = sorted(f for f in os.listdir(frames_dir) if f.endswith(".vxt"))
    if len(names) < 2:
        raise PairingError(f"{frames_dir} holds {len(names)} frame files, need at least 2")
    frames = [fileio.load_tensor(os.path.join(frames_dir, n)) for n in names]
    for name, fr in zip(names, frames):
        if fr.shape != frames[0].shape or fr.ndim != 3 or fr.shape[0] != 3:
            raise PairingError(f"frame {name} has shape {fr.shape}, "
                               f"expected {frames[0].shape}")
    t_steps = len(frames)
    flow_files = list(flow_files)
    if len(flow_files) != t_steps - 1:
        raise PairingError(
            f"{t_steps} frames require {t_steps - 1} flow files, got {len(flow_files)}")
    h, w = frames[0].shape[1:]
    steps = []
    for path in flow_files:
        step = fileio.load_flow(path)
        if step.shape != (2, 1, h, w):
            raise PairingError(f"flow file {path} has shape {step.shape}, "
                               f"expected (2, 1, {h}, {w})")
        steps.append(step)
    clip = np.stack(frames, axis=1)
    flow = np.concatenate(steps, axis=1)
    return [VideoSample(clip, flow, label)]
