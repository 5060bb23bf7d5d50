"""Binary tensor and flow-field file formats.

Tensor files ("VXT1"): 4-byte magic, uint32 rank, rank uint32 extents, then
row-major float32 payload. Flow files ("VXF1"): 4-byte magic, uint32 T-1, H,
W, then the u plane followed by the v plane, each (T-1, H, W) row-major
float32. All integers and floats are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .tensor import MAX_RANK

TENSOR_MAGIC = b"VXT1"
FLOW_MAGIC = b"VXF1"

_U32 = struct.Struct("<I")


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def _read_u32(fh, what: str) -> int:
    return _U32.unpack(_read_exact(fh, 4, what))[0]


def save_tensor(path: str, data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise FormatError(f"tensor rank {arr.ndim} outside 1..{MAX_RANK}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(_U32.pack(arr.ndim))
        for extent in arr.shape:
            fh.write(_U32.pack(extent))
        fh.write(arr.astype("<f4").tobytes())


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != TENSOR_MAGIC:
            raise FormatError(f"bad tensor magic {magic!r} in {path}")
        rank = _read_u32(fh, "rank")
        if rank < 1 or rank > MAX_RANK:
            raise FormatError(f"tensor rank {rank} outside 1..{MAX_RANK} in {path}")
        shape = tuple(_read_u32(fh, f"extent {i}") for i in range(rank))
        count = int(np.prod(shape))
        payload = _read_exact(fh, 4 * count, "payload")
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"trailing bytes after payload in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_flow(path: str, flow: np.ndarray) -> None:
    """``flow`` is (2, T-1, H, W): u then v displacement planes."""
    arr = np.ascontiguousarray(flow, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] != 2:
        raise FormatError(f"flow must be (2, T-1, H, W), got {arr.shape}")
    _, tm1, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(_U32.pack(tm1))
        fh.write(_U32.pack(h))
        fh.write(_U32.pack(w))
        fh.write(arr[0].astype("<f4").tobytes())
        fh.write(arr[1].astype("<f4").tobytes())


def load_flow(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FLOW_MAGIC:
            raise FormatError(f"bad flow magic {magic!r} in {path}")
        tm1 = _read_u32(fh, "frame count")
        h = _read_u32(fh, "height")
        w = _read_u32(fh, "width")
        plane = tm1 * h * w
        payload = _read_exact(fh, 4 * 2 * plane, "u/v planes")
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"trailing bytes after payload in {path}")
    planes = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return planes.reshape(2, tm1, h, w)
