"""Shared helpers: stable seeding and atomic file writes."""

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np


def stable_u64(text: str) -> int:
    """Map a string to a platform-stable unsigned 64-bit integer."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(*keys) -> np.random.Generator:
    """Deterministic generator derived from a tuple of ints/strings.

    The same key tuple always yields the same stream, independent of call
    order or platform.
    """
    entropy = [stable_u64(k) if isinstance(k, str) else int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file atomically (tempfile in the same dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
