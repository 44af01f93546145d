"""Checkpoint serialization.

File layout (all integers little-endian):

    offset  size  field
    0       4     magic "LWTA"
    4       4     format version (u32, currently 1)
    8       4     descriptor length D (u32)
    12      8     weight-blob byte count W (u64)
    20      D     architecture descriptor (UTF-8 JSON)
    20+D    W     weight blobs, float32, declaration order
    20+D+W  4     CRC32 of all preceding bytes (u32)

Weights are stored as 32-bit floats regardless of in-memory precision.
Each malformed-file class raises its own error type; see lwta.errors.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DescriptorError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedError,
    VersionError,
)
from .network import NetworkSpec

MAGIC = b"LWTA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def save(network, path):
    """Write a checkpoint for ``network``. Weights must be finite."""
    for p in network.params():
        if not np.isfinite(p.data).all():
            raise NonFiniteError("refusing to save non-finite weights")
    descriptor = json.dumps(network.spec.to_dict(), sort_keys=True).encode("utf-8")
    blobs = b"".join(p.data.astype("<f4").tobytes() for p in network.params())
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(descriptor), len(blobs)) + descriptor + blobs
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load(path):
    """Read a checkpoint back into a Network with trainable float32 weights."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size + 4:
        raise TruncatedError(f"file is {len(raw)} bytes, shorter than the fixed header")
    magic, version, desc_len, blob_bytes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    expected = _HEADER.size + desc_len + blob_bytes + 4
    if len(raw) != expected:
        raise TruncatedError(f"file is {len(raw)} bytes but headers declare {expected}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumError("checksum mismatch")

    desc_end = _HEADER.size + desc_len
    try:
        descriptor = json.loads(raw[_HEADER.size : desc_end].decode("utf-8"))
        spec = NetworkSpec.from_dict(descriptor)
    except Exception as e:  # descriptor passed CRC but is still unusable
        raise DescriptorError(f"unreadable architecture descriptor: {e}") from e

    from .training import init_weights  # deferred: training imports this module

    network = init_weights(spec, rng=None, kind="zeros")
    declared = sum(int(np.prod(p.shape)) for p in network.params()) * 4
    if declared != blob_bytes:
        raise ShapeMismatchError(
            f"descriptor declares {declared} weight bytes but file holds {blob_bytes}"
        )
    offset = desc_end
    for p in network.params():
        count = int(np.prod(p.shape))
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        p.data = values.reshape(p.shape).astype(np.float32)
        offset += count * 4
    return network
