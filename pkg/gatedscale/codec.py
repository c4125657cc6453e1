"""Binary formats: GST1 tensors, checkpoints and PGM heatmaps.

GST1 = b"GST1", u8 dtype code (0 f32, 1 f64), u8 ndim (4), four u32
extents, then the row-major little-endian payload. A checkpoint is a
sequence of (u32 name length, UTF-8 name, GST1 tensor) in store order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from gatedscale.errors import FormatError
from gatedscale.params import ParamStore

MAGIC = b"GST1"
HEADER = struct.Struct("<4sBB4I")
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.dtype not in _CODES:
        raise FormatError(f"GST1 stores f32 or f64, got {data.dtype}")
    if data.ndim != 4:
        raise FormatError(f"GST1 stores 4-D tensors, got shape {data.shape}")
    code = _CODES[data.dtype]
    header = HEADER.pack(MAGIC, code, 4, *data.shape)
    return header + np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``. Returns the array and the offset just past it."""
    if len(buf) - offset < HEADER.size:
        raise FormatError("truncated GST1 header")
    magic, code, ndim, *shape = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if ndim != 4:
        raise FormatError(f"ndim must be 4, got {ndim}")
    dtype = _DTYPES[code]
    start = offset + HEADER.size
    end = start + int(np.prod(shape)) * dtype.itemsize
    if end > len(buf):
        raise FormatError(f"payload needs {end - start} bytes, {len(buf) - start} available")
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=start).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), end


def write_tensor(path: Path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(data))


def read_tensor(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    data, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after the tensor")
    return data


def encode_checkpoint(store: ParamStore) -> bytes:
    parts = []
    for name, entry in store.entries():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + encode_tensor(entry.tensor.data))
    return b"".join(parts)


def save_checkpoint(path: Path, store: ParamStore) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


def load_checkpoint(path: Path, store: ParamStore) -> None:
    """Overwrite every entry of ``store`` from the file; names, order, shapes and dtypes must match."""
    buf = Path(path).read_bytes()
    offset = 0
    expected = list(store)
    loaded = []
    seen = 0
    while offset < len(buf):
        if len(buf) - offset < 4:
            raise FormatError("truncated checkpoint name length")
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + n].decode("utf-8")
        offset += n
        data, offset = decode_tensor(buf, offset)
        if seen >= len(expected) or expected[seen] != name:
            want = expected[seen] if seen < len(expected) else "end of store"
            raise FormatError(f"checkpoint entry {seen} is {name!r}, store expects {want!r}")
        target = store[name]
        if data.shape != target.shape or data.dtype != target.dtype:
            raise FormatError(
                f"{name}: checkpoint holds {data.dtype}{data.shape}, store has {target.dtype}{target.shape}"
            )
        loaded.append((name, data))
        seen += 1
    if seen != len(expected):
        raise FormatError(f"checkpoint has {seen} entries, store has {len(expected)}")
    for name, data in loaded:
        store.assign(name, data)


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255) of a (H, W) uint8 array."""
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-D uint8 array, got {pixels.dtype}{pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))
