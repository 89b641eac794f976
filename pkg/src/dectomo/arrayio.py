"""Fixed binary array format and checksummed index files.

Layout (all little-endian): magic ``SDMP``, u32 version, u32 ndims,
u64 dims[ndims], float32 payload in C order. The format is deliberately
dumb so that round-trips are bit-exact and files are diffable by checksum.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDMP"
VERSION = 1


class ArrayFormatError(ValueError):
    """Raised when a file does not decode as a valid array container."""


def write_array(path, arr):
    """Write ``arr`` to ``path`` as float32 in the fixed binary layout."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype("<f4", copy=False).tobytes())
    return path


def read_array(path):
    """Read an array written by :func:`write_array`.

    Raises :class:`ArrayFormatError` on bad magic, unknown version,
    or a payload inconsistent with the declared dims.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ArrayFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ArrayFormatError(f"{path}: truncated header")
    version, ndims = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ArrayFormatError(f"{path}: unsupported version {version}")
    header_end = 12 + 8 * ndims
    if len(raw) < header_end:
        raise ArrayFormatError(f"{path}: truncated dims block")
    dims = struct.unpack_from(f"<{ndims}Q", raw, 12)
    count = int(np.prod(dims)) if ndims else 1
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise ArrayFormatError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} need {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_index(path, entries):
    """Write an index file: one ``path<TAB>sha256<TAB>role`` line per artifact.

    ``entries`` is an iterable of (relative_path, sha256, role) triples.
    """
    lines = ["\t".join(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_index(path):
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rel, digest, role = line.split("\t")
        entries.append((rel, digest, role))
    return entries
