"""Small shared helpers: canonical config hashing and worker counts."""

from __future__ import annotations

import json
import os

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

THREADS_ENV = "PROTOBANK_THREADS"


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 encoding of `text`."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> str:
    """Canonical JSON text: sorted keys, no whitespace. Hash input for
    configs and cache headers."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Hex FNV-1a hash of an object's canonical JSON form."""
    return f"{fnv1a64(canonical_json(obj)):016x}"


def worker_count(requested: int | None = None) -> int:
    """Number of parallel workers to use, capped by the PROTOBANK_THREADS
    environment variable when it is set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            cap_n = int(cap)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from exc
        if cap_n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {cap_n}")
        n = min(n, cap_n)
    return max(1, n)
