import hashlib

import numpy as np


def derive_seed(seed: int, label: str, *extra: int) -> int:
    """Stable 63-bit sub-seed for ``(seed, label, *extra)``."""
    key = ":".join([str(int(seed)), label, *(str(int(e)) for e in extra)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


def derive_rng(seed: int, label: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label, *extra))
