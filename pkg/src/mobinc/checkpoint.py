"""Binary checkpoint format for graph parameters and batch-norm stats.

Layout (all integers little-endian uint32 unless noted):

    magic   b"MINC"
    version uint32 (currently 1)
    topo    32 raw bytes, sha256 over the ordered (name, op kind, shape)
            triples of every parameter and buffer
    count   uint32 number of entries
    entry*  name_len, name (utf-8), rank, dims[rank], raw little-endian
            float32 values (row-major)

Loading parses and validates the whole file before touching the graph, so
a failed load leaves the target untouched. Saving writes to a temp file in
the destination directory and renames it into place.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, IncompatibleCheckpointError
from .graph import ModelGraph

MAGIC = b"MINC"
VERSION = 1


def topology_hash(graph: ModelGraph) -> bytes:
    """Stable digest over the ordered (name, op kind, shape) state triples."""
    h = hashlib.sha256()
    for name, kind, arr in graph.state_entries():
        h.update(f"{name}|{kind}|{','.join(str(d) for d in arr.shape)}\n".encode())
    return h.digest()


def save_checkpoint(graph: ModelGraph, path: str | Path) -> None:
    path = Path(path)
    entries = list(graph.state_entries())
    chunks = [MAGIC, struct.pack("<I", VERSION), topology_hash(graph),
              struct.pack("<I", len(entries))]
    for name, _, arr in entries:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(graph: ModelGraph, path: str | Path) -> None:
    """Restore every parameter and buffer bitwise from the file.

    Raises IncompatibleCheckpointError when the stored topology hash does
    not match the graph, and CorruptCheckpointError for malformed files.
    The graph is modified only after the file fully parses.
    """
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise IncompatibleCheckpointError(f"{path}: unsupported version {version}")
    stored_hash = r.take(32)
    if stored_hash != topology_hash(graph):
        raise IncompatibleCheckpointError(
            f"{path}: topology hash mismatch; checkpoint was saved from a different model"
        )
    count = r.u32()
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name in loaded:
            raise CorruptCheckpointError(f"{path}: duplicate entry {name!r}")
        loaded[name] = data
    if r.pos != len(blob):
        raise CorruptCheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    expected = {name: arr for name, _, arr in graph.state_entries()}
    if set(loaded) != set(expected):
        raise IncompatibleCheckpointError(f"{path}: entry names do not match the graph")
    for name, arr in expected.items():
        if loaded[name].shape != arr.shape:
            raise IncompatibleCheckpointError(
                f"{path}: entry {name!r} has shape {loaded[name].shape}, graph needs {arr.shape}"
            )
    for name, arr in expected.items():
        arr[...] = loaded[name]
