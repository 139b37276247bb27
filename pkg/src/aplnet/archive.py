"""Single-file archive of named text blocks and named float64 tensors.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"APLNET\\x00\\x01"
    version    u32       currently 1
    n_text     u32
    n_text times:
        name_len u16, name (utf-8)
        size     u32, payload (utf-8)
    n_tensor   u32
    n_tensor times:
        name_len u16, name (utf-8)
        ndim     u8
        dims     ndim x u64
        payload  prod(dims) x float64 little-endian, row-major

Models store the network description in the text block ``network_spec``
and parameters as ``param/<name>``; checkpoints add ``velocity/<name>``,
``init/<name>`` and a JSON ``meta`` block.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"APLNET\x00\x01"
VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(texts: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(texts)))
    for name, text in texts.items():
        raw_name, payload = name.encode(), text.encode()
        buf.write(struct.pack("<H", len(raw_name)) + raw_name)
        buf.write(struct.pack("<I", len(payload)) + payload)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)) + raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ArchiveError(f"truncated archive at byte {pos} (wanted {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise ArchiveError("not an aplnet archive (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    texts: dict[str, str] = {}
    (n_text,) = struct.unpack("<I", take(4))
    for _ in range(n_text):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode()
        (size,) = struct.unpack("<I", take(4))
        texts[name] = take(size).decode()
    tensors: dict[str, np.ndarray] = {}
    (n_tensor,) = struct.unpack("<I", take(4))
    for _ in range(n_tensor):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = math.prod(shape)
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise ArchiveError(f"{len(data) - pos} trailing bytes after archive end")
    return texts, tensors


def save(path, texts: dict[str, str], tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(texts, tensors))
    return path


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
