"""Deterministic derivation of child seeds from a root seed.

Every source of randomness in the package is seeded through here so that
independent subsystems (initialization, shuffling, bound models, ...) get
decorrelated streams without any hidden global state.
"""

import hashlib


def derive_seed(seed: int, *tags: object) -> int:
    """Derive a 64-bit child seed from ``seed`` and a path of tags."""
    path = ":".join(str(t) for t in tags)
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
