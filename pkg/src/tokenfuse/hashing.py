"""Stable content hashes used to tag artifacts with their producing config."""

import hashlib

import numpy as np


def content_hash(*parts) -> str:
    """Hash a mix of strings, ints, floats and arrays into a short stable id.

    Arrays are hashed over their raw bytes in C order, so the hash depends on
    values and dtype but not on memory layout.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, bytes):
            h.update(part)
        else:
            h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:16]
