"""Binary checkpoint files.

Layout (little-endian)::

    b"MMVC" | u32 version | u64 fingerprint | u32 count
    count x ( u16 name_len | name (UTF-8) | u32 rank | rank x u32 extent | f32 payload )

The fingerprint identifies the model configuration the tensors belong to.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"MMVC"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    def __init__(self, expected: int, found: int):
        super().__init__(
            f"checkpoint fingerprint {found:#018x} does not match config fingerprint {expected:#018x}; "
            "pass allow_transfer=True (or use the transfer command) to adapt it"
        )
        self.expected = expected
        self.found = found


def save_checkpoint(params: dict, fingerprint: int, path: Union[str, Path]) -> None:
    """Write ``params`` (name -> array) atomically as float32."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<IQI", VERSION, fingerprint & 0xFFFFFFFFFFFFFFFF, len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(
    path: Union[str, Path], expected_fingerprint: Optional[int] = None, allow_transfer: bool = False
) -> tuple:
    """Read a checkpoint, returning ``(params, fingerprint)``.

    Raises:
        CorruptCheckpointError: bad magic, truncated or oversized payload.
        VersionMismatchError: unknown format version.
        FingerprintMismatchError: ``expected_fingerprint`` given, differs, and
            ``allow_transfer`` is false.
    """
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    if reader.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads version {VERSION}")
    fingerprint, count = reader.unpack("<QI", "header")
    params = {}
    for i in range(count):
        (name_len,) = reader.unpack("<H", f"name length of tensor {i}")
        try:
            name = reader.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor {i} name is not UTF-8") from exc
        (rank,) = reader.unpack("<I", f"rank of {name}")
        if rank > 16:
            raise CorruptCheckpointError(f"{name}: implausible rank {rank} at offset {reader.pos - 4}")
        shape = reader.unpack(f"<{rank}I", f"extents of {name}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        payload = reader.take(nbytes, f"payload of {name}")
        if name in params:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.pos != len(blob):
        raise CorruptCheckpointError(f"{len(blob) - reader.pos} trailing bytes after the last tensor")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint and not allow_transfer:
        raise FingerprintMismatchError(expected_fingerprint, fingerprint)
    return params, fingerprint


def config_sidecar(path: Union[str, Path]) -> Path:
    """Path of the flat config text saved next to a checkpoint."""
    path = Path(path)
    return path.with_name(path.name + ".cfg")
