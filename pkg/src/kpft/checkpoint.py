"""Binary checkpoints holding only the trainable parameters.

Layout (all integers little-endian)::

    magic        4 bytes  b"KPFT"
    version      u32      currently 1
    entry count  u32
    entries, sorted by path:
        path length  u32
        path         UTF-8 bytes
        dtype code   u8     0 = float32, 1 = float64
        rank         u8
        dims         rank x u32
        values       prod(dims) little-endian floats, row-major
"""

import struct

import numpy as np

from kpft.model import trainable_parameters

MAGIC = b"KPFT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def encode(entries):
    """Serialize ``[(path, array), ...]``; entries are written sorted by path."""
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for path, arr in sorted(entries, key=lambda e: e[0]):
        arr = np.asarray(arr)
        if arr.dtype not in CODE_OF:
            raise CheckpointError(f"{path}: unsupported dtype {arr.dtype}")
        name = path.encode("utf-8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<BB", CODE_OF[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def decode(data):
    """Parse checkpoint bytes into an ordered list of (path, array)."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a KPFT checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    entries = []
    for _ in range(count):
        (length,) = struct.unpack("<I", take(4))
        try:
            path = bytes(take(length)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("entry path is not valid UTF-8") from None
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        entries.append((path, arr.astype(dtype.newbyteorder("="))))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last entry")
    return entries


def save_checkpoint(model):
    return encode([(path, var.value) for path, var in trainable_parameters(model)])


def load_checkpoint(data, model):
    """Restore trainable parameters in place. Nothing is modified unless every entry validates."""
    entries = decode(data)
    params = dict(trainable_parameters(model))
    seen = set()
    for path, arr in entries:
        var = params.get(path)
        if var is None:
            raise CheckpointError(f"unknown parameter path {path!r}")
        if path in seen:
            raise CheckpointError(f"duplicate entry {path!r}")
        if arr.shape != var.shape:
            raise CheckpointError(f"{path}: checkpoint shape {arr.shape} != model shape {var.shape}")
        seen.add(path)
    missing = sorted(set(params) - seen)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} trainable tensors, e.g. {missing[0]!r}")
    for path, arr in entries:
        # in place, so tensors shared between layers stay shared
        params[path].value[...] = arr


def write_checkpoint(path, model):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def read_checkpoint(path, model):
    with open(path, "rb") as fh:
        load_checkpoint(fh.read(), model)
