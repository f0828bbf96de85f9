"""ETHM model container.

Layout (little-endian): magic ``ETHM``, u16 version, u8 kind (0 cnn, 1 lstm),
u8 data mode (the CPHS mode byte of the training records), u8 flags (bit 0:
LSTM outer tanh), u32 tensor count, then per tensor: u16 name length, name bytes, u8 rank,
u32 dims[rank], float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .cnn import EthCnn
from .lstm import EthLstm

MAGIC = b"ETHM"
VERSION = 1
KIND_CNN = 0
KIND_LSTM = 1
_HEADER = struct.Struct("<4sHBBBI")
FLAG_OUTER_TANH = 1


def write_tensors(path, kind: int, tensors: dict, data_mode=0, flags=0) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, kind, data_mode, flags, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path):
    """Returns ``(header dict, tensors)``."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, kind, data_mode, flags, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an ETHM file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return {"kind": kind, "data_mode": data_mode, "flags": flags}, tensors


def save_model(path, model, data_mode=0) -> None:
    """Write ``model``; ``data_mode`` records which kind of database trained it."""
    if isinstance(model, EthCnn):
        write_tensors(path, KIND_CNN, model.params, data_mode)
    elif isinstance(model, EthLstm):
        flags = FLAG_OUTER_TANH if model.outer_tanh else 0
        write_tensors(path, KIND_LSTM, model.params, data_mode, flags)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def load_model(path):
    """Returns ``(model, header)`` where ``header`` holds kind, data_mode, flags."""
    head, tensors = read_tensors(path)
    if head["kind"] == KIND_CNN:
        return EthCnn(tensors), head
    if head["kind"] == KIND_LSTM:
        return EthLstm(tensors, outer_tanh=bool(head["flags"] & FLAG_OUTER_TANH)), head
    raise ValueError(f"{path}: unknown model kind {head['kind']}")
