"""Deterministic seed fan-out: every component derives its RNG seed from one root."""

import hashlib


def derive_seed(base: int, label: str) -> int:
    """Map (base seed, component label) to a stable 32-bit seed."""
    digest = hashlib.blake2s(f"{base}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")
