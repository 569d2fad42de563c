"""Seeded RNG streams.

All randomness in the package flows from one master seed through named child
streams, so that components (and parallel workers within a component) draw
from independent generators whose output does not depend on execution order
or thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


def child_stream(master_seed: int, component: str, index: int = 0) -> np.random.Generator:
    """Deterministic per-component, per-index generator."""
    ss = np.random.SeedSequence([int(master_seed), _name_key(component), int(index)])
    return np.random.default_rng(ss)
