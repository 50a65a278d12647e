"""Small helpers shared by the engine modules."""
import hashlib
from typing import Any

import numpy as np

ELLIPSIS = "..."


def clamp(value: float, low: float, high: float) -> float:
    return max(low, min(high, value))


def truncate(text: str, limit: int) -> str:
    """
    Cut `text` to at most `limit` characters, marking the cut with "...".
    Text already within the limit is returned unchanged.
    """
    if limit < 0:
        raise ValueError("limit must be non-negative")
    if len(text) <= limit:
        return text
    if limit <= len(ELLIPSIS):
        return text[:limit]
    return text[: limit - len(ELLIPSIS)] + ELLIPSIS


def derive_seed(seed: int, *path: Any) -> int:
    """
    Derive a child seed from a root seed and a path of components.

    The same (seed, path) always gives the same 64-bit integer, so every random
    draw in a run is a pure function of the run seed and the node path.
    """
    joined = "/".join(str(part) for part in path)
    digest = hashlib.sha256(f"{seed:016x}/{joined}".encode()).hexdigest()
    return int(digest[:16], 16)


def rng_for(seed: int, *path: Any) -> np.random.Generator:
    """Independent numpy Generator for one (seed, path) pair."""
    return np.random.default_rng(derive_seed(seed, *path))


def pct_points(delta: float) -> str:
    """Format a fraction delta as signed percentage points, e.g. +5.40 pp."""
    return f"{delta * 100:+.2f} pp"
