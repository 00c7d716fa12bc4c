from __future__ import annotations

import hashlib
import json
import os
import zlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Deterministic child seed from a parent seed and string/int tags."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(t & 0xFFFFFFFF if isinstance(t, int) else zlib.crc32(str(t).encode()))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def worker_count() -> int:
    """Worker cap from ``FCX_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("FCX_THREADS", "1")))
    except ValueError:
        return 1
