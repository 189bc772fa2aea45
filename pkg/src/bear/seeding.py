from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def round_half_up(x: float) -> int:
    # Tolerance keeps products like 0.35 * 10 from landing just under .5.
    return int(x + 0.5 + 1e-9)
