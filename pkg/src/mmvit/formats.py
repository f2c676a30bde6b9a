"""Readers and writers for the raw file formats: NTC tensors, PCM16 WAV, binary PPM."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]

NTC_MAGIC = b"NTC1"


class FormatError(ValueError):
    """Unsupported or malformed file; the message names the byte offset."""


# -- NTC v1: b"NTC1" | u32 rank | rank x u32 extents | f32 payload -------------

def write_ntc(path: PathLike, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = NTC_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_ntc(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != NTC_MAGIC:
        raise FormatError(f"{path}: bad NTC magic at offset 0")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated NTC header at offset 4")
    (rank,) = struct.unpack_from("<I", blob, 4)
    end = 8 + 4 * rank
    if rank > 16 or len(blob) < end:
        raise FormatError(f"{path}: truncated or invalid NTC extents at offset 8 (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != end + 4 * count:
        raise FormatError(f"{path}: NTC payload at offset {end} holds {len(blob) - end} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=end, count=count).reshape(shape).astype(np.float32)


# -- WAV (RIFF, PCM16) ----------------------------------------------------------

def decode_wav(blob: bytes, source: str = "<bytes>") -> tuple:
    """Return ``(samples in [-1, 1], sample_rate)``; multi-channel audio is averaged."""
    if len(blob) < 12:
        raise FormatError(f"{source}: truncated RIFF header at offset {len(blob)}")
    if blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{source}: not a RIFF/WAVE file (offset 0)")
    pos = 12
    fmt = None
    data = None
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError(f"{source}: truncated chunk header at offset {pos}")
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise FormatError(f"{source}: chunk {chunk_id!r} at offset {pos} claims {size} bytes, only {len(blob) - body} present")
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{source}: fmt chunk too short at offset {pos}")
            fmt = struct.unpack_from("<HHIIHH", blob, body) + (pos,)
        elif chunk_id == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{source}: missing fmt chunk (scanned to offset {pos})")
    if data is None:
        raise FormatError(f"{source}: missing data chunk (scanned to offset {pos})")
    audio_format, channels, rate, _, block_align, bits, fmt_pos = fmt
    if audio_format not in (1, 0xFFFE) or bits != 16:
        raise FormatError(f"{source}: only PCM16 is supported (format {audio_format}, {bits} bits; fmt at offset {fmt_pos})")
    if channels < 1 or rate < 1:
        raise FormatError(f"{source}: invalid channel count or rate in fmt at offset {fmt_pos}")
    start, size = data
    frame_bytes = 2 * channels
    if size % frame_bytes:
        raise FormatError(f"{source}: data chunk at offset {start} has {size} bytes, not a multiple of {frame_bytes}")
    pcm = np.frombuffer(blob, dtype="<i2", offset=start, count=size // 2).reshape(-1, channels)
    samples = pcm.astype(np.float64).mean(axis=1) / 32768.0
    return samples, rate


def load_wav(path: PathLike) -> tuple:
    return decode_wav(Path(path).read_bytes(), str(path))


def encode_wav(samples, sample_rate: int) -> bytes:
    """PCM16 WAV bytes; ``samples`` is ``[n]`` (mono) or ``[n, channels]``."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    pcm = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, sample_rate, sample_rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path: PathLike, samples, sample_rate: int) -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate))


# -- PPM (P6) -------------------------------------------------------------------

def decode_ppm(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode binary PPM into ``[3, H, W]`` floats in [0, 1]."""
    if blob[:2] != b"P6":
        raise FormatError(f"{source}: not a binary PPM (P6) file (offset 0)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: malformed PPM header at offset {pos}")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise FormatError(f"{source}: invalid PPM dimensions/maxval in header ending at offset {pos}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * 3 * dtype.itemsize
    if len(blob) - pos < need:
        raise FormatError(f"{source}: truncated PPM raster at offset {pos}: need {need} bytes, have {len(blob) - pos}")
    raster = np.frombuffer(blob, dtype=dtype, offset=pos, count=width * height * 3)
    return raster.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def encode_ppm(pixels) -> bytes:
    """``[3, H, W]`` floats in [0, 1] to 8-bit P6 bytes."""
    arr = np.asarray(pixels, dtype=np.float64)
    _, h, w = arr.shape
    raster = np.clip(np.round(arr * 255.0), 0, 255).astype("u1").transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + raster.tobytes()
