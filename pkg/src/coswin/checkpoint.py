"""Binary checkpoint format for named tensors.

Layout (little-endian)::

    b"CSWN"  u16 version=1  u32 count
    count x { u16 name_len, utf-8 name, u8 dtype (0=f32, 1=f64),
              u8 rank, rank x u32 extents, raw scalars }
    u64 CRC-64/XZ of every preceding byte

Tensors are written in sorted name order, so equal content gives equal bytes.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ChecksumError, CheckpointError, MagicError, TensorMismatchError, TruncatedError
from .kernels import crc64

MAGIC = b"CSWN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise MagicError("not a CSWN checkpoint (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise MagicError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    body_end = pos
    (stored,) = struct.unpack("<Q", take(8))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checksum")
    if crc64(view[:body_end]) != stored:
        raise ChecksumError("checkpoint CRC-64 mismatch")
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# ------------------------------------------------- model-level state


def collect_state(model, weights=None, optimizer=None) -> dict[str, np.ndarray]:
    state = {name: t.data for name, t in model.named_parameters()}
    state.update({name: t.data for name, t in model.named_buffers()})
    if weights is not None:
        state["loss.s1"] = weights.s1.data
        state["loss.s2"] = weights.s2.data
    if optimizer is not None:
        state.update(optimizer.state_dict())
    return state


def _targets(model, weights=None) -> dict[str, object]:
    targets = {name: t for name, t in model.named_parameters()}
    targets.update({name: t for name, t in model.named_buffers()})
    if weights is not None:
        targets["loss.s1"] = weights.s1
        targets["loss.s2"] = weights.s2
    return targets


def apply_state(state: Mapping[str, np.ndarray], model, weights=None, optimizer=None, strict: bool = True) -> None:
    """Copy ``state`` into live tensors; strict mode rejects any name or shape mismatch."""
    targets = _targets(model, weights)
    optim_keys = {k for k in state if k.startswith("optim.")}
    if strict:
        for name in sorted(targets):
            if name not in state:
                raise TensorMismatchError(f"checkpoint lacks tensor {name!r}", name)
        for name in sorted(state):
            if name not in targets and name not in optim_keys:
                raise TensorMismatchError(f"checkpoint has unknown tensor {name!r}", name)
    present = [name for name in sorted(targets) if name in state]
    for name in present:
        t, arr = targets[name], state[name]
        if t.shape != arr.shape:
            raise TensorMismatchError(
                f"tensor {name!r}: checkpoint shape {arr.shape} vs model shape {t.shape}", name
            )
    for name in present:
        t = targets[name]
        t.data = state[name].astype(t.dtype, copy=True)
    if optimizer is not None and optim_keys:
        optimizer.load_state_dict({k: state[k] for k in optim_keys}, strict=strict)


def save_checkpoint(path, model, weights=None, optimizer=None) -> None:
    write_tensors(path, collect_state(model, weights, optimizer))


def load_checkpoint(path, model=None, weights=None, optimizer=None, strict: bool = True) -> dict[str, np.ndarray]:
    state = read_tensors(path)
    if model is not None:
        apply_state(state, model, weights, optimizer, strict)
    return state
