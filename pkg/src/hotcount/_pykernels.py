"""Pure-Python sketch kernels.

Reference implementation of the hashing, update and estimate loops. The
compiled ``_ckernels`` module implements the same functions and must stay
bit-identical with this one.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_FP_SEED = 0x2545F4914F6CDD1D
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Splitmix64 stream of ``count`` seeds starting at ``seed``."""
    state = seed & MASK64
    out = []
    for _ in range(count):
        state = (state + GOLDEN) & MASK64
        out.append(mix64(state))
    return out


def fingerprint(key: bytes) -> int:
    h = mix64(len(key) ^ _FP_SEED)
    for off in range(0, len(key), 8):
        chunk = int.from_bytes(key[off:off + 8], "little")
        h = mix64(((h ^ chunk) + GOLDEN) & MASK64)
    return h


def fingerprints(keys: Sequence[bytes]) -> np.ndarray:
    return np.fromiter((fingerprint(k) for k in keys), dtype=np.uint64, count=len(keys))


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def locate_many(fps, row_seeds, sign_seeds, width, signed):
    """Columns (n_keys, h) and signs (n_keys, h) for a batch of fingerprints."""
    fps = np.asarray(fps, dtype=np.uint64)[:, None]
    rows = np.asarray(row_seeds, dtype=np.uint64)[None, :]
    cols = (_mix64_vec(fps ^ rows) >> np.uint64(32)) & np.uint64(width - 1)
    cols = cols.astype(np.int64)
    if signed:
        sv = _mix64_vec(fps ^ np.asarray(sign_seeds, dtype=np.uint64)[None, :])
        parity = np.bitwise_count(sv) & np.uint8(1)
        signs = 1.0 - 2.0 * parity.astype(np.float64)
    else:
        signs = np.ones(cols.shape, dtype=np.float64)
    return cols, signs


def update_many(cells, row_seeds, sign_seeds, keys, deltas, signed):
    if len(keys) == 0:
        return
    depth, width = cells.shape
    cols, signs = locate_many(fingerprints(keys), row_seeds, sign_seeds, width, signed)
    rows = np.broadcast_to(np.arange(depth), cols.shape)
    contrib = signs * np.asarray(deltas, dtype=np.float64)[:, None]
    # add.at applies repeated indices in order, matching the compiled loop
    np.add.at(cells, (rows.ravel(), cols.ravel()), contrib.ravel())


def estimate_many(cells, row_seeds, sign_seeds, keys, signed):
    if len(keys) == 0:
        return np.empty(0, dtype=np.float64)
    depth, width = cells.shape
    cols, signs = locate_many(fingerprints(keys), row_seeds, sign_seeds, width, signed)
    vals = cells[np.arange(depth)[None, :], cols]
    if not signed:
        return vals.min(axis=1)
    vals = vals * signs
    mid = depth // 2
    return np.partition(vals, mid, axis=1)[:, mid].copy()
