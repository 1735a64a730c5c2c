"""Purpose-labelled seed derivation from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed for ``labels`` under ``master``; independent of call order."""
    h = hashlib.sha256(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f" + str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
