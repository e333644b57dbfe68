"""Binary checkpoint container shared by every training stage.

Layout, all integers little-endian unsigned 32-bit:

    bytes 0..3   magic b"FGPL"
    bytes 4..7   format version (currently 1)
    u32 length + UTF-8 metadata blob of newline-separated key=value lines
    zero or more array records until end of file, each:
        u32 length + UTF-8 array name
        u32 rank, then rank u32 dims
        raw IEEE-754 32-bit little-endian values (row-major)

Values are stored in 32-bit even though training runs in 64-bit, so a
round-trip is exact only to float32 rounding. A file whose magic or version
does not match, or that ends mid-record, raises CheckpointError without
leaving partial state behind.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamStore

MAGIC = b"FGPL"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file or invalid content for this format."""


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file: string metadata plus named arrays."""

    metadata: dict[str, str] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: ParamStore, **metadata: str) -> "Checkpoint":
        return cls(
            metadata={k: str(v) for k, v in metadata.items()},
            arrays={name: p.data.copy() for name, p in store.items()},
        )

    def load_into(self, store: ParamStore) -> None:
        """Copy arrays into an existing store; names and shapes must match."""
        names = set(store.names())
        if names != set(self.arrays):
            missing = sorted(names - set(self.arrays))
            extra = sorted(set(self.arrays) - names)
            raise CheckpointError(
                f"parameter mismatch: missing {missing}, unexpected {extra}"
            )
        for name, p in store.items():
            arr = self.arrays[name]
            if arr.shape != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': file {arr.shape} vs store {tuple(p.shape)}"
                )
            p.values[:] = arr.reshape(-1)


def _encode_metadata(metadata: dict[str, str]) -> bytes:
    lines = []
    for k in sorted(metadata):
        v = str(metadata[k])
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"metadata key/value not encodable: {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict[str, str]:
    text = blob.decode("utf-8")
    out: dict[str, str] = {}
    if not text:
        return out
    for line in text.split("\n"):
        if "=" not in line:
            raise CheckpointError(f"metadata line without '=': {line!r}")
        k, _, v = line.partition("=")
        out[k] = v
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Serialize atomically: write a sibling temp file, then rename over path."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta = _encode_metadata(ckpt.metadata)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f4").tobytes(order="C"))
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated file: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        metadata = _decode_metadata(_read_exact(f, meta_len, "metadata"))
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated file: partial record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "array name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of '{name}'"))
            dims = struct.unpack(
                "<" + "I" * rank, _read_exact(f, 4 * rank, f"dims of '{name}'")
            )
            count = 1
            for dim in dims:
                count *= dim
            raw = _read_exact(f, 4 * count, f"values of '{name}'")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
            if name in arrays:
                raise CheckpointError(f"duplicate array record '{name}'")
            arrays[name] = arr
    return Checkpoint(metadata=metadata, arrays=arrays)
