"""Named random substreams derived from one integer seed."""

from __future__ import annotations

import os
import zlib

import numpy as np

DETERMINISTIC_ENV = "HYBRIDLAB_DETERMINISTIC"


def substream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``purpose``; the same (seed, purpose) always yields the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode())]))


def deterministic_mode() -> bool:
    """True unless the environment variable is set to 0/false/off."""
    return os.environ.get(DETERMINISTIC_ENV, "1").strip().lower() not in ("0", "false", "off", "no")
