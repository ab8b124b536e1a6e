"""Deterministic seed derivation.

Every stochastic step in the pipeline draws from a generator seeded by a
stable hash of (base_seed, *labels).  Nothing relies on ambient global RNG
state, which is what makes checkpoint/resume replays bit-identical.
"""

import hashlib

import numpy as np
import torch


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit seed from a base seed and a label path.

    Labels may be ints or strings; the same path always yields the same seed
    across processes and platforms.
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_gen(base: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base, *labels))
    return g


def np_gen(base: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *labels))
