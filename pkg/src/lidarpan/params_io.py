"""Flat binary snapshots of named parameter sets.

Layout: magic ``LPST``, version u32, then one record per parameter:
name length u16, utf-8 name bytes, rank u8, one u32 per extent, and the
float32 payload. All integers and floats are little-endian; records
follow the mapping's insertion order.
"""

import struct

import numpy as np

from .errors import DataError
from .tensor import Param

MAGIC = b"LPST"
VERSION = 1


def save_params(params, path):
    """Write a name -> Param (or ndarray) mapping to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, p in params.items():
            arr = np.ascontiguousarray(
                p.data if isinstance(p, Param) else p, dtype=np.float32)
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise DataError("parameter name too long", name=name[:64])
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.astype("<f4").tobytes())


def load_params(path):
    """Read a snapshot back as an ordered name -> float32 ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError("bad magic in parameter snapshot", path=str(path),
                        magic=blob[:4].hex())
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError("unsupported snapshot version", version=version)
    out = {}
    off = 8
    total = len(blob)

    def need(n, what):
        if off + n > total:
            raise DataError(f"truncated snapshot while reading {what}",
                            offset=off, needed=n, available=total - off)

    while off < total:
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        need(nlen, "name")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        need(1, "rank")
        rank = blob[off]
        off += 1
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        need(4 * count, f"data of '{name}'")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        out[name] = data.copy()
    return out


def assign_params(params, loaded):
    """Copy loaded arrays into an existing name -> Param mapping."""
    for name, p in params.items():
        if name not in loaded:
            raise DataError("snapshot is missing a parameter", name=name)
        arr = loaded[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise DataError("snapshot extent mismatch", name=name,
                            expected=list(p.data.shape), found=list(arr.shape))
        p.data[...] = arr.astype(p.data.dtype)
