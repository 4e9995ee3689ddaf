"""Deterministic seed fan-out.

Every random stream is a pure function of the root seed plus integer keys
(stage tag, row, column, iteration ...), so results never depend on the
order in which work items are executed or on the number of worker threads.
"""

from __future__ import annotations

import zlib

import numpy as np

# stage tags; append only, values are part of the reproducibility contract
STAGE_LMC = 1
STAGE_HOLDOUTS = 2
STAGE_BOOTSTRAP = 3
STAGE_SYNTH_COEF = 4
STAGE_SYNTH_NOISE = 5
STAGE_MISSING = 6
STAGE_COLLATE = 7
STAGE_FAIR_RACE = 8
STAGE_BAGGING = 9
STAGE_CV = 10


def rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)]))


def child_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``keys``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def name_key(name: str) -> int:
    """Stable integer key for a string (e.g. a method name)."""
    return zlib.crc32(name.encode())
