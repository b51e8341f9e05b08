"""``NTC1`` tensor container and the checkpoint file built from it.

Container layout (little-endian)::

    b"NTC1" | dtype u8 | ndim u8 | 2 zero bytes | ndim x u64 dims | row-major payload

dtype codes: 0=f32, 1=f64, 2=u8, 3=i64.

Checkpoint layout::

    entry count u32 | entries of (name length u16, UTF-8 name, container)

One entry named ``__config__`` holds the model config as UTF-8 JSON in a u8
container. Entries are written in sorted name order.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import BinaryIO

import numpy as np

from ..tensor import Tensor
from ..vit import ModelState

MAGIC = b"NTC1"
CONFIG_KEY = "__config__"

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


class ContainerError(ValueError):
    """Malformed container or checkpoint bytes; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    for code, want in _CODES.items():
        if dt.kind == want.kind and dt.itemsize == want.itemsize:
            return code
    raise ContainerError("unsupported-dtype", str(dt))


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    if arr.ndim > 255:
        raise ContainerError("too-many-dims", str(arr.ndim))
    header = MAGIC + struct.pack("<BBxx", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes(order="C")
    return header + payload


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ContainerError("truncated", f"expected {n} bytes of {what}, got {len(b)}")
    return b


def read_array(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise ContainerError("bad-magic", repr(magic))
    code, ndim, r0, r1 = struct.unpack("<BBBB", _read_exact(f, 4, "header"))
    if code not in _CODES:
        raise ContainerError("bad-dtype-code", str(code))
    if r0 or r1:
        raise ContainerError("bad-reserved", f"{r0},{r1}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, "dims"))
    dt = _CODES[code]
    count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
    payload = _read_exact(f, count * dt.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def decode_array(buf: bytes) -> np.ndarray:
    f = io.BytesIO(buf)
    arr = read_array(f)
    if f.read(1):
        raise ContainerError("trailing-bytes")
    return arr


def save_array(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_array(arr))


def load_array(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_array(f.read())


def encode_checkpoint(arrays: dict[str, np.ndarray], config: dict) -> bytes:
    if CONFIG_KEY in arrays:
        raise ContainerError("reserved-name", CONFIG_KEY)
    entries = dict(arrays)
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries[CONFIG_KEY] = np.frombuffer(cfg, dtype=np.uint8)
    out = [struct.pack("<I", len(entries))]
    for name in sorted(entries):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError("name-too-long", name[:40])
        out.append(struct.pack("<H", len(raw)) + raw + encode_array(entries[name]))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    f = io.BytesIO(buf)
    (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        try:
            name = _read_exact(f, n, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerError("bad-name", str(e)) from None
        if name in arrays:
            raise ContainerError("duplicate-name", name)
        arrays[name] = read_array(f)
    if f.read(1):
        raise ContainerError("trailing-bytes")
    if CONFIG_KEY not in arrays:
        raise ContainerError("missing-config")
    try:
        config = json.loads(arrays.pop(CONFIG_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError("bad-config", str(e)) from None
    return arrays, config


def save_checkpoint(path: str | os.PathLike, state) -> None:
    """Write a :class:`~selfmae.vit.ModelState` (or ``(arrays, config)``) to ``path``."""
    if isinstance(state, tuple):
        arrays, config = state
    else:
        arrays, config = {k: v.data for k, v in state.params.items()}, state.config
    with open(path, "wb") as f:
        f.write(encode_checkpoint(arrays, config))


def load_checkpoint(path: str | os.PathLike):
    """Read a checkpoint back into a trainable :class:`~selfmae.vit.ModelState`."""
    with open(path, "rb") as f:
        arrays, config = decode_checkpoint(f.read())
    params = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in arrays.items()}
    return ModelState(params, config)
