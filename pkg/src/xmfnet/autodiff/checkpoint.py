"""Binary parameter checkpoints.

Layout: the magic ``XMF1`` followed, for every parameter, by
``u16 name_len | utf-8 name | u8 rank | u32 dims... | f64 values...``,
all little-endian. The file ends after the last record.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import IngestionError

MAGIC = b"XMF1"


def dumps(params: Mapping[str, object]) -> bytes:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(buf: bytes, source="<bytes>") -> dict:
    if buf[:4] != MAGIC:
        raise IngestionError(source, "bad checkpoint magic")
    out = {}
    pos = 4
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise IngestionError(source, f"truncated values for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise IngestionError(source, f"truncated checkpoint ({exc})") from None
    return out


def save_parameters(path, params: Mapping[str, object]) -> None:
    Path(path).write_bytes(dumps(params))


def load_parameters(path) -> dict:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestionError(path, str(exc)) from None
    return loads(buf, source=path)
