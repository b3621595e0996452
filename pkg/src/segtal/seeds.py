"""Named sub-seed derivation so one root seed drives every RNG stream."""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(root: int, label: str) -> int:
    """Stable 62-bit seed derived from a root seed and a stream name.

    Uses SHA-256 so the mapping is identical across processes and platforms;
    distinct labels give statistically independent streams.
    """
    digest = hashlib.sha256(f"{int(root)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 2
