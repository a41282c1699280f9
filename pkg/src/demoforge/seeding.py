"""Deterministic seed derivation.

A master seed fans out into per-component seeds through a keyed hash, so
ablation rows share data while downstream components differ only where
intended.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, tag: str) -> int:
    """Stable 32-bit seed derived from (master, tag)."""
    digest = hashlib.blake2s(f"{master}:{tag}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")
