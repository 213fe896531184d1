"""Versioned, checksummed binary checkpoints.

Layout::

    b"DPSMCKPT" | u32 version | u64 header length | JSON header | raw arrays | sha256

The header lists each array's name, dtype, shape and byte offset. The
trailing digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import atomic_write

MAGIC = b"DPSMCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    config_text: str
    iteration: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def encode(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "config_text": ckpt.config_text,
        "iteration": ckpt.iteration,
        "meta": ckpt.meta,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 12 + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint file")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch (truncated or corrupted file)")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + head_len])
    blob = body[start + head_len :]
    arrays = {}
    for e in header["arrays"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(e["shape"])
    return Checkpoint(header["config_hash"], header["config_text"], header["iteration"], arrays,
                      header["meta"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode(ckpt))


def load_checkpoint(path, expected_hash: str | None = None, override: bool = False) -> Checkpoint:
    """Read and verify a checkpoint.

    A different format version or config hash is refused unless ``override`` is set.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: unreadable ({exc.strerror})") from None
    ckpt = decode(data, str(path))
    if ckpt.version != VERSION and not override:
        raise CheckpointError(f"{path}: format version {ckpt.version}, this build reads {VERSION}")
    if expected_hash is not None and ckpt.config_hash != expected_hash and not override:
        raise CheckpointError(f"{path}: config hash {ckpt.config_hash} does not match "
                              f"current config hash {expected_hash}")
    return ckpt
