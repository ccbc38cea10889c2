"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"STCK"  u32 version
    repeated until EOF:
        u64 name_len, name (UTF-8), u64 rank, rank x u64 dims, f64 payload

Names beginning with ``__`` carry metadata (e.g. provenance) and hold an
empty payload; :func:`read_checkpoint` returns them separately.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"STCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    records = [(f"__{k}__={v}", np.zeros(0)) for k, v in (meta or {}).items()]
    records += [(name, np.asarray(arr, dtype="<f8")) for name, arr in params.items()]
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            if name.startswith("__"):
                key, _, value = name[2:].partition("__=")
                meta[key] = value
            else:
                params[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return params, meta


def write_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
