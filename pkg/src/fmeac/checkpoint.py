"""Binary checkpoint format for named float64 tensors.

Layout: magic ``FMEAC1`` then, per tensor, ``u32`` name length, UTF-8
name, ``u32`` rank, ``u32`` dims, and the payload as little-endian
float64 in row-major order. All integers are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"FMEAC1"

# model kinds are stored as a one-element tensor under this name
KIND_KEY = "model_kind"
MODEL_KINDS = {"gnn": 1.0, "pan": 2.0, "bpn": 3.0, "agent": 4.0}


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ContractError("not an FMEAC1 checkpoint (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise ContractError(f"truncated or corrupt checkpoint: {exc}") from exc
    return out


def save(path, tensors: dict[str, np.ndarray], kind: str | None = None) -> None:
    if kind is not None:
        tensors = {KIND_KEY: np.array([MODEL_KINDS[kind]]), **tensors}
    Path(path).write_bytes(dumps(tensors))


def load(path, kind: str | None = None) -> dict[str, np.ndarray]:
    tensors = loads(Path(path).read_bytes())
    if kind is not None:
        stored = tensors.pop(KIND_KEY, None)
        if stored is None or float(stored[0]) != MODEL_KINDS[kind]:
            raise ContractError(f"checkpoint {path} does not hold a {kind} model")
    return tensors
