"""Counter-based random streams.

Every random quantity in the package is a pure function of a 64-bit key and an
integer counter, so any worker can regenerate any value without communication.
The mixer is the SplitMix64 finalizer; keys are derived by folding labelled
parts through it.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def counter_hash(key: int, counter: int) -> int:
    """Scalar reference of the stream: ``mix64(key ^ mix64(counter * GOLDEN))``."""
    return mix64((key & MASK64) ^ mix64((counter * GOLDEN) & MASK64))


def _part_to_int(part) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "little")
    return int(part) & MASK64


def derive_key(*parts) -> int:
    """Fold ints and string labels into one 64-bit key."""
    h = mix64(GOLDEN)
    for part in parts:
        h = mix64(h ^ mix64((_part_to_int(part) + GOLDEN) & MASK64))
    return h


def hash_counters(key: int, counters: np.ndarray) -> np.ndarray:
    """Vectorised ``counter_hash`` over a uint64 counter array."""
    z = counters.astype(np.uint64) * np.uint64(GOLDEN)
    z = _mix64_array(z)
    z ^= np.uint64(key & MASK64)
    return _mix64_array(z)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z ^= z >> np.uint64(30)
    z *= np.uint64(MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(MIX2)
    z ^= z >> np.uint64(31)
    return z


def uniform53(key: int, counters: np.ndarray) -> np.ndarray:
    """Uniforms in (0, 1) with 53-bit resolution, one per counter."""
    h = hash_counters(key, counters)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
