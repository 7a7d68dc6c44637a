"""Binary tensor containers shared by model (.cpem) and adapter (.cpea) files.

Layout::

    magic (4 bytes) | u32 LE version | u64 LE header length | UTF-8 JSON header
    | row-major LE float32 payloads in manifest order | u64 LE FNV-1a of payload
"""

from __future__ import annotations

import json
import os
import struct
from typing import Sequence

import numpy as np

from .numerics import fnv1a64

VERSION = 1
MODEL_MAGIC = b"CPEM"
ADAPTER_MAGIC = b"CPEA"


class ContainerError(ValueError):
    """Unreadable container; ``code`` is one of bad_magic, bad_version,
    bad_header, truncated, hash_mismatch."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def encode(magic: bytes, header: dict, tensors: Sequence[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors)
    return b"".join([magic, struct.pack("<IQ", VERSION, len(head)), head, payload,
                     struct.pack("<Q", fnv1a64(payload))])


def decode(magic: bytes, data: bytes, manifest_key: str = "tensors"):
    """Parse container bytes. Returns ``(header, [arrays in manifest order], payload hash)``.

    The manifest is a list whose entries end with ``rows, cols``.
    """
    if len(data) < 16:
        raise ContainerError("truncated", "file shorter than fixed header")
    if data[:4] != magic:
        raise ContainerError("bad_magic", f"expected {magic!r}, found {data[:4]!r}")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError("bad_version", f"unsupported version {version}")
    if 16 + hlen > len(data):
        raise ContainerError("truncated", "header extends past end of file")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        manifest = header[manifest_key]
        sizes = [int(e[-2]) * int(e[-1]) for e in manifest]
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ContainerError("bad_header", f"cannot parse header: {e}") from None
    start = 16 + hlen
    end = start + 4 * sum(sizes)
    if end + 8 != len(data):
        raise ContainerError("truncated", f"expected {end + 8} bytes, found {len(data)}")
    payload = data[start:end]
    (stored,) = struct.unpack("<Q", data[end:end + 8])
    actual = fnv1a64(payload)
    if stored != actual:
        raise ContainerError("hash_mismatch", f"payload hash {actual:016x} != stored {stored:016x}")
    arrays, off = [], 0
    for entry, n in zip(manifest, sizes):
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32)
        arrays.append(a.reshape(int(entry[-2]), int(entry[-1])))
        off += 4 * n
    return header, arrays, actual


def write_bytes(path: str | os.PathLike, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def read_bytes(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()
