"""Checkpoint format shared by the detector and the generator.

Layout: 4-byte magic, u32 format version, u64 header length, UTF-8 JSON header,
then raw little-endian tensor buffers concatenated in sorted parameter-name
order. Everything is written deterministically, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FFCK"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


def serialize(kind: str, state: dict[str, torch.Tensor], arch: dict, meta: dict) -> bytes:
    """Encode a state dict plus architecture/metadata into one deterministic blob."""
    names = sorted(state)
    tensors = []
    buffers = []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        dtype = str(t.numpy().dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        tensors.append({"name": name, "shape": list(t.shape), "dtype": dtype})
        buffers.append(t.numpy().tobytes())
    header = json.dumps(
        {"kind": kind, "arch": arch, "meta": meta, "tensors": tensors},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQ", FORMAT_VERSION, len(header))
    out += header
    for buf in buffers:
        out += buf
    return bytes(out)


def deserialize(blob: bytes) -> tuple[str, dict, dict, dict[str, torch.Tensor]]:
    """Decode a blob back to (kind, arch, meta, state_dict)."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a facefool checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header_end = 16 + header_len
    header = json.loads(blob[16:header_end].decode())
    state: dict[str, torch.Tensor] = {}
    offset = header_end
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(blob) - offset})")
    return header["kind"], header["arch"], header["meta"], state


def save(path: str | Path, kind: str, state: dict[str, torch.Tensor],
         arch: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(kind, state, arch, meta))
    return path


def load(path: str | Path, expect_kind: str | None = None):
    blob = Path(path).read_bytes()
    kind, arch, meta, state = deserialize(blob)
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected a {expect_kind} checkpoint, found {kind}")
    return kind, arch, meta, state


def fingerprint(kind: str, state: dict[str, torch.Tensor], arch: dict, meta: dict) -> str:
    """SHA-256 over the serialized blob; stable iff weights and metadata are unchanged."""
    return hashlib.sha256(serialize(kind, state, arch, meta)).hexdigest()
