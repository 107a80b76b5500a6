"""Flat key/value checkpoint files.

A checkpoint is a dictionary of named float64 vectors.  On disk:

    bytes 0..7    magic  b"BCKV0001"
    uint64 LE     entry count
    per entry:
        uint32 LE     key length in bytes
        key           UTF-8
        uint64 LE     element count
        float64 LE[]  values

Every value is stored as a flat 1-D array; scalars use one element.
Entries are written in sorted key order so the same state always
produces the same bytes.
"""

import struct

import numpy as np

MAGIC = b"BCKV0001"


def save_checkpoint(path, entries):
    """Write a mapping of name -> array-like to ``path``."""
    blob = [MAGIC, struct.pack("<Q", len(entries))]
    for key in sorted(entries):
        values = np.asarray(entries[key], dtype=np.float64).ravel()
        raw = key.encode("utf-8")
        blob.append(struct.pack("<I", len(raw)))
        blob.append(raw)
        blob.append(struct.pack("<Q", values.size))
        blob.append(values.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> 1-D float64 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    entries = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError(f"truncated checkpoint: {path}")
        (klen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + klen + 8 > len(data):
            raise ValueError(f"truncated checkpoint: {path}")
        key = data[pos : pos + klen].decode("utf-8")
        pos += klen
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        end = pos + 8 * n
        if end > len(data):
            raise ValueError(f"truncated checkpoint: {path}")
        entries[key] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    if pos != len(data):
        raise ValueError(f"trailing bytes after {count} entries: {path}")
    return entries
