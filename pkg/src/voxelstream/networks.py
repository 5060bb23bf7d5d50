"""Network builders and the three two-stream model variants.

The encoder is a C3D-style stack: five 3x3x3 conv layers (ReLU, shape
preserving padding) with max pooling after the first four, then two fully
connected layers. The decoder mirrors the encoder's pooling schedule with
transposed convolutions and emits a (N, 2, T-1, H, W) flow field.

Variants:
  initial    - two independently trained encoders; the motion pathway is a
               flow estimator (encoder + decoder) whose mid-level features
               are concatenated with appearance features under a linear
               classification head. Its inference pipeline therefore runs
               the decoder.
  combined   - one shared encoder with a classification head and a flow
               decoder tapped off the last conv map; both losses train the
               same encoder weights.
  twostream  - separate appearance and motion encoders; the decoder
               supervises only the motion stream, and the classifier reads
               the concatenation of both fc7 vectors. At test time the
               decoder is skipped.
"""

from __future__ import annotations

import os
import re
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import fileio
from .errors import FormatError, InvalidSpecError, ShapeError
from .ops3d import ConvSpec, conv3d, conv_output_shape, deconv3d, deconv_output_shape, maxpool3d
from .tensor import Tensor, channel_concat, he_std, linear, no_grad, relu, reshape

DEFAULT_POOLING = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), None)

VARIANTS = ("initial", "combined", "twostream")


@dataclass
class NetworkSpec:
    """Declarative architecture constants for one model family.

    ``conv_channels`` / ``fc_width`` hold the full-scale widths; the
    effective widths are scaled by ``width_factor`` (min 1). ``pooling``
    lists the max-pool window after each conv stage (stride = window), or
    None for no pooling at that stage.
    """

    num_classes: int
    clip: tuple = (3, 8, 32, 32)                    # (C, T, H, W)
    conv_channels: tuple = (64, 128, 256, 256, 256)
    kernel: tuple = (3, 3, 3)
    fc_width: int = 2048
    width_factor: float = 1.0
    pooling: tuple = DEFAULT_POOLING
    motion_tap: str = "fc7"                         # initial-variant feature tap: fc7 | conv5

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidSpecError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.conv_channels) != 5:
            raise InvalidSpecError(f"exactly 5 conv stages required, got {self.conv_channels}")
        if len(self.pooling) != 5:
            raise InvalidSpecError(f"pooling schedule needs 5 entries, got {self.pooling}")
        if len(self.clip) != 4 or self.clip[0] != 3:
            raise InvalidSpecError(f"clip must be (3, T, H, W), got {self.clip}")
        if self.clip[1] < 2:
            raise InvalidSpecError(f"clips need T >= 2 frames for flow, got T={self.clip[1]}")
        if self.width_factor <= 0:
            raise InvalidSpecError(f"width_factor must be positive, got {self.width_factor}")
        if self.motion_tap not in ("fc7", "conv5"):
            raise InvalidSpecError(f"motion_tap must be 'fc7' or 'conv5', got {self.motion_tap!r}")
        if min(self.scaled_channels) < 1 or self.scaled_fc < 1:
            raise InvalidSpecError(f"scaled widths collapse below 1 at factor {self.width_factor}")

    @property
    def scaled_channels(self) -> tuple:
        return tuple(max(1, int(round(c * self.width_factor))) for c in self.conv_channels)

    @property
    def scaled_fc(self) -> int:
        return max(1, int(round(self.fc_width * self.width_factor)))

    @classmethod
    def desk_scale(cls, num_classes: int = 4, clip=(3, 8, 32, 32), **kw) -> "NetworkSpec":
        """Laptop-sized preset: 1/8 of the full widths."""
        return cls(num_classes=num_classes, clip=clip, width_factor=0.125, **kw)

    @classmethod
    def full_scale(cls, num_classes: int, clip=(3, 16, 112, 112), **kw) -> "NetworkSpec":
        """Full-width preset: conv stages 64..256, fc 2048."""
        return cls(num_classes=num_classes, clip=clip, width_factor=1.0, **kw)


def _param(rng, shape, fan_in, dtype) -> Tensor:
    data = rng.normal(0.0, he_std(fan_in), size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Encoder:
    """Five conv/pool stages then fc6/fc7; exposes the last conv map and fc7."""

    def __init__(self, spec: NetworkSpec, rng, dtype=np.float32):
        self.spec = spec
        channels = spec.scaled_channels
        kernel = tuple(spec.kernel)
        padding = tuple(k // 2 for k in kernel)

        self.stages = []
        in_ch = spec.clip[0]
        spatial = tuple(spec.clip[1:])
        for i, out_ch in enumerate(channels):
            cspec = ConvSpec(in_ch, out_ch, kernel, (1, 1, 1), padding)
            spatial = conv_output_shape(spatial, cspec)
            w = _param(rng, (out_ch, in_ch) + kernel, in_ch * np.prod(kernel), dtype)
            b = _zeros((out_ch,), dtype)
            pool = spec.pooling[i]
            if pool is not None:
                pooled = tuple((s - p) // p + 1 for s, p in zip(spatial, pool))
                if any(v < 1 for v in pooled):
                    raise InvalidSpecError(
                        f"stage conv{i + 1}: pooling {pool} collapses extents {spatial}")
                spatial = pooled
            self.stages.append({"name": f"conv{i + 1}", "w": w, "b": b,
                                "spec": cspec, "pool": pool})
            in_ch = out_ch

        self.conv_out_shape = (channels[-1],) + spatial    # (C5, T5, H5, W5)
        self.flat_dim = int(np.prod(self.conv_out_shape))
        fc = spec.scaled_fc
        self.fc6_w = _param(rng, (fc, self.flat_dim), self.flat_dim, dtype)
        self.fc6_b = _zeros((fc,), dtype)
        self.fc7_w = _param(rng, (fc, fc), fc, dtype)
        self.fc7_b = _zeros((fc,), dtype)

    def forward(self, x: Tensor):
        """Returns (last conv feature map, fc7 vector)."""
        h = x
        for st in self.stages:
            h = relu(conv3d(h, st["w"], st["b"], st["spec"]))
            if st["pool"] is not None:
                h = maxpool3d(h, st["pool"], st["pool"])
        conv_map = h
        n = x.shape[0]
        h = reshape(h, (n, self.flat_dim))
        h = relu(linear(h, self.fc6_w, self.fc6_b))
        fc7 = relu(linear(h, self.fc7_w, self.fc7_b))
        return conv_map, fc7

    def parameters(self) -> dict:
        params = {}
        for st in self.stages:
            params[f"{st['name']}.w"] = st["w"]
            params[f"{st['name']}.b"] = st["b"]
        params.update({"fc6.w": self.fc6_w, "fc6.b": self.fc6_b,
                       "fc7.w": self.fc7_w, "fc7.b": self.fc7_b})
        return params


class Decoder:
    """Transposed-conv mirror of the encoder's pooling schedule.

    Each pooled stage is inverted by a deconv whose kernel and stride equal
    the pool window (exact shape inversion), with ReLU. A final stride-1
    deconv maps to 2 flow channels and contracts time by one frame, with no
    nonlinearity.
    """

    FINAL_KERNEL = (2, 3, 3)
    FINAL_PADDING = (1, 1, 1)

    def __init__(self, spec: NetworkSpec, conv_out_shape, rng, dtype=np.float32):
        self.spec = spec
        channels = spec.scaled_channels
        t, h, w = spec.clip[1:]
        target = (t - 1, h, w)

        self.stages = []
        cur_ch = conv_out_shape[0]
        spatial = tuple(conv_out_shape[1:])
        # walk the pooled stages back-to-front; the deconv after pool_i
        # restores the resolution (and width) that stage i+1 consumed
        idx = 0
        for i in range(4, -1, -1):
            pool = spec.pooling[i]
            if pool is None:
                continue
            idx += 1
            out_ch = channels[i]
            dspec = ConvSpec(cur_ch, out_ch, tuple(pool), tuple(pool), (0, 0, 0))
            spatial = deconv_output_shape(spatial, dspec)
            # kernel == stride: every output position connects to exactly one
            # input position per channel, so the effective fan-in is cur_ch
            wt = _param(rng, (cur_ch, out_ch) + tuple(pool), cur_ch, dtype)
            bt = _zeros((out_ch,), dtype)
            self.stages.append({"name": f"up{idx}", "w": wt, "b": bt,
                                "spec": dspec, "relu": True})
            cur_ch = out_ch

        fspec = ConvSpec(cur_ch, 2, self.FINAL_KERNEL, (1, 1, 1), self.FINAL_PADDING)
        final_spatial = deconv_output_shape(spatial, fspec)
        if final_spatial != target:
            raise InvalidSpecError(
                f"decoder mirror mismatch at stage 'flow': produces {final_spatial}, "
                f"target {target} (pre-final spatial {spatial})")
        fan = cur_ch * int(np.prod(self.FINAL_KERNEL))   # stride 1: dense taps
        fw = _param(rng, (cur_ch, 2) + self.FINAL_KERNEL, fan, dtype)
        fb = _zeros((2,), dtype)
        self.stages.append({"name": "flow", "w": fw, "b": fb, "spec": fspec, "relu": False})
        self.out_shape = (2,) + target

    def forward(self, conv_map: Tensor) -> Tensor:
        h = conv_map
        for st in self.stages:
            h = deconv3d(h, st["w"], st["b"], st["spec"])
            if st["relu"]:
                h = relu(h)
        return h

    def parameters(self) -> dict:
        params = {}
        for st in self.stages:
            params[f"{st['name']}.w"] = st["w"]
            params[f"{st['name']}.b"] = st["b"]
        return params


class LinearHead:
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.w = _param(rng, (out_dim, in_dim), in_dim, dtype)
        self.b = _zeros((out_dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}


ForwardResult = namedtuple("ForwardResult", ["logits", "flow", "features"])


def _prefixed(prefix, params):
    return {f"{prefix}.{k}": v for k, v in params.items()}


class _ModelBase:
    variant: str = ""
    inference_runs_decoder: bool = False

    def parameters(self) -> dict:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, clips: Tensor, with_flow: bool = True) -> ForwardResult:
        raise NotImplementedError

    def _check_clip(self, clips: Tensor) -> None:
        expect = self.spec.clip
        if clips.data.ndim != 5 or clips.shape[1:] != tuple(expect):
            raise ShapeError(f"clip batch {clips.shape} does not match spec (N,{expect})")


class InitialModel(_ModelBase):
    variant = "initial"
    inference_runs_decoder = True

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(seed))
        self.appearance = Encoder(spec, rng, dtype)
        self.motion = Encoder(spec, rng, dtype)
        self.decoder = Decoder(spec, self.motion.conv_out_shape, rng, dtype)
        self.head = LinearHead(self.feature_dim, spec.num_classes, rng, dtype)

    @property
    def feature_dim(self) -> int:
        motion_dim = (self.spec.scaled_fc if self.spec.motion_tap == "fc7"
                      else self.motion.flat_dim)
        return self.spec.scaled_fc + motion_dim

    def _motion_feature(self, conv_map, fc7):
        if self.spec.motion_tap == "fc7":
            return fc7
        n = conv_map.shape[0]
        return reshape(conv_map, (n, self.motion.flat_dim))

    def forward(self, clips, with_flow=True, detach_motion=False) -> ForwardResult:
        self._check_clip(clips)
        _, app7 = self.appearance.forward(clips)
        if detach_motion:
            with no_grad():
                mot5, mot7 = self.motion.forward(clips)
                flow = self.decoder.forward(mot5) if with_flow else None
        else:
            mot5, mot7 = self.motion.forward(clips)
            flow = self.decoder.forward(mot5) if with_flow else None
        features = channel_concat(app7, self._motion_feature(mot5, mot7))
        logits = self.head.forward(features)
        return ForwardResult(logits, flow, features)

    def parameters(self) -> dict:
        params = {}
        params.update(_prefixed("appearance", self.appearance.parameters()))
        params.update(_prefixed("motion", self.motion.parameters()))
        params.update(_prefixed("decoder", self.decoder.parameters()))
        params.update(_prefixed("head", self.head.parameters()))
        return params


class CombinedModel(_ModelBase):
    variant = "combined"

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(seed))
        self.encoder = Encoder(spec, rng, dtype)
        self.decoder = Decoder(spec, self.encoder.conv_out_shape, rng, dtype)
        self.cls_head = LinearHead(spec.scaled_fc, spec.num_classes, rng, dtype)

    @property
    def feature_dim(self) -> int:
        return self.spec.scaled_fc

    def forward(self, clips, with_flow=True) -> ForwardResult:
        self._check_clip(clips)
        conv_map, fc7 = self.encoder.forward(clips)
        logits = self.cls_head.forward(fc7)
        flow = self.decoder.forward(conv_map) if with_flow else None
        return ForwardResult(logits, flow, fc7)

    def parameters(self) -> dict:
        params = {}
        params.update(_prefixed("encoder", self.encoder.parameters()))
        params.update(_prefixed("decoder", self.decoder.parameters()))
        params.update(_prefixed("cls_head", self.cls_head.parameters()))
        return params


class TwoStreamModel(_ModelBase):
    variant = "twostream"

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(seed))
        self.appearance = Encoder(spec, rng, dtype)
        self.motion = Encoder(spec, rng, dtype)
        self.decoder = Decoder(spec, self.motion.conv_out_shape, rng, dtype)
        self.head = LinearHead(2 * spec.scaled_fc, spec.num_classes, rng, dtype)

    @property
    def feature_dim(self) -> int:
        return 2 * self.spec.scaled_fc

    def forward(self, clips, with_flow=True) -> ForwardResult:
        self._check_clip(clips)
        _, app7 = self.appearance.forward(clips)
        mot5, mot7 = self.motion.forward(clips)
        features = channel_concat(app7, mot7)
        logits = self.head.forward(features)
        flow = self.decoder.forward(mot5) if with_flow else None
        return ForwardResult(logits, flow, features)

    def parameters(self) -> dict:
        params = {}
        params.update(_prefixed("appearance", self.appearance.parameters()))
        params.update(_prefixed("motion", self.motion.parameters()))
        params.update(_prefixed("decoder", self.decoder.parameters()))
        params.update(_prefixed("head", self.head.parameters()))
        return params


def build_model(variant: str, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
    classes = {"initial": InitialModel, "combined": CombinedModel,
               "twostream": TwoStreamModel}
    if variant not in classes:
        raise InvalidSpecError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return classes[variant](spec, seed, dtype)


def forward_variant(model, clips: Tensor, with_flow: bool = True) -> ForwardResult:
    return model.forward(clips, with_flow=with_flow)


def extract_features(model, clips: Tensor) -> Tensor:
    """Pre-classifier feature vectors, detached from any recording."""
    with no_grad():
        result = model.forward(clips, with_flow=False)
    return result.features.detach()


# ---------------------------------------------------------------------------
# Checkpoints: a text manifest mapping parameter paths to tensor files.

MANIFEST_NAME = "manifest.txt"
_MANIFEST_LINE = re.compile(r"^(?P<key>[\w.]+)\s*=\s*(?P<value>\S+)$")


def save_checkpoint(model, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for path, param in sorted(model.parameters().items()):
        fname = f"{path}.vxt"
        fileio.save_tensor(os.path.join(directory, fname), param.data)
        lines.append(f"{path} = {fname}")
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(model, directory: str) -> None:
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise FormatError(f"no checkpoint manifest at {manifest}")
    entries = {}
    with open(manifest) as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            m = _MANIFEST_LINE.match(raw)
            if m is None:
                raise FormatError(f"bad manifest line: {raw!r}")
            entries[m.group("key")] = m.group("value")
    params = model.parameters()
    missing = sorted(set(params) - set(entries))
    extra = sorted(set(entries) - set(params))
    if missing or extra:
        raise FormatError(f"manifest mismatch: missing {missing}, unexpected {extra}")
    for path, param in params.items():
        data = fileio.load_tensor(os.path.join(directory, entries[path]))
        if data.shape != param.shape:
            raise ShapeError(f"checkpoint tensor {path} has shape {data.shape}, "
                             f"model expects {param.shape}")
        param.data = data.astype(param.dtype)
