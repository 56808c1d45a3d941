"""Count-min and count-median sketches with Laplace-initialized cells.

Both variants share one cell layout: ``depth`` rows of ``width`` float64
counters. The count-median variant additionally hashes every key to a sign
per row, so that collisions cancel in expectation and the median of signed
cells is an unbiased estimate even after symmetric noise is added.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from hotcount import kernels
from hotcount.errors import CompatibilityError, ConfigurationError, DimensionError
from hotcount.privacy import laplace_array

DEFAULT_DEPTH = 5
DEFAULT_WIDTH = 1 << 20
MAX_WIDTH = 1 << 32

Key = bytes | str


class SketchKind(enum.Enum):
    COUNT_MIN = "count_min"
    COUNT_MEDIAN = "count_median"

    @property
    def signed(self) -> bool:
        return self is SketchKind.COUNT_MEDIAN


def as_key(key: Key) -> bytes:
    if isinstance(key, bytes):
        return key
    if isinstance(key, str):
        return key.encode("utf-8")
    raise TypeError(f"sketch keys must be bytes or str, not {type(key).__name__}")


@dataclass(eq=False)
class Sketch:
    """A depth x width grid of float64 counters.

    Construct with :func:`new_sketch`; the constructor does no validation.
    """

    kind: SketchKind
    depth: int
    width: int
    seed: int
    noise_scale: float
    cells: np.ndarray
    row_seeds: np.ndarray
    sign_seeds: np.ndarray = field(repr=False)

    @property
    def frozen(self) -> bool:
        return not self.cells.flags.writeable

    def freeze(self) -> "Sketch":
        """Make the cell grid read-only. Sealed tables are never updated again."""
        self.cells.flags.writeable = False
        return self

    def update(self, key: Key, delta: float = 1.0) -> None:
        self.update_many([key], [delta])

    def update_many(self, keys: Sequence[Key], deltas: Sequence[float] | np.ndarray) -> None:
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.shape != (len(keys),):
            raise ValueError("keys and deltas must have the same length")
        if not np.all(np.isfinite(deltas)):
            raise ValueError("sketch deltas must be finite")
        if self.frozen:
            raise ValueError("sketch is sealed and cannot be updated")
        kernels.update_many(
            self.cells, self.row_seeds, self.sign_seeds,
            [as_key(k) for k in keys], deltas, self.kind.signed,
        )

    def estimate(self, key: Key) -> float:
        return float(self.estimate_many([key])[0])

    def estimate_many(self, keys: Sequence[Key]) -> np.ndarray:
        return kernels.estimate_many(
            self.cells, self.row_seeds, self.sign_seeds,
            [as_key(k) for k in keys], self.kind.signed,
        )

    def compatible(self, other: "Sketch") -> bool:
        return (
            self.kind is other.kind
            and self.depth == other.depth
            and self.width == other.width
            and np.array_equal(self.row_seeds, other.row_seeds)
            and np.array_equal(self.sign_seeds, other.sign_seeds)
        )

    def copy(self) -> "Sketch":
        return Sketch(
            self.kind, self.depth, self.width, self.seed, self.noise_scale,
            self.cells.copy(), self.row_seeds.copy(), self.sign_seeds.copy(),
        )

    def grid_digest(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.cells).tobytes()).hexdigest()


def _check_dims(kind: SketchKind, depth: int, width: int) -> None:
    if depth < 1:
        raise DimensionError(f"depth must be >= 1, got {depth}")
    if width < 2 or width > MAX_WIDTH or width & (width - 1):
        raise DimensionError(f"width must be a power of two in [2, 2**32], got {width}")
    if kind is SketchKind.COUNT_MEDIAN and depth % 2 == 0:
        raise ConfigurationError("count-median sketches need an odd depth")


def hash_seeds(seed: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and sign seeds for a sketch built from ``seed``."""
    stream = kernels.derive_seeds(seed, 2 * depth)
    return (
        np.array(stream[:depth], dtype=np.uint64),
        np.array(stream[depth:], dtype=np.uint64),
    )


def new_sketch(
    kind: SketchKind = SketchKind.COUNT_MIN,
    depth: int = DEFAULT_DEPTH,
    width: int = DEFAULT_WIDTH,
    seed: int = 0,
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Sketch:
    """Allocate a sketch whose cells are i.i.d. Laplace(0, noise_scale) draws.

    Hash assignment depends only on ``seed``; the noise depends only on
    ``rng``. A zero ``noise_scale`` yields an all-zero grid and draws nothing.
    """
    kind = SketchKind(kind)
    _check_dims(kind, depth, width)
    if not (noise_scale >= 0 and math.isfinite(noise_scale)):
        raise ValueError(f"noise_scale must be a finite value >= 0, got {noise_scale}")
    row_seeds, sign_seeds = hash_seeds(seed, depth)
    if not kind.signed:
        sign_seeds = np.zeros(depth, dtype=np.uint64)
    if noise_scale > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_scale > 0")
        cells = laplace_array(noise_scale, (depth, width), rng)
    else:
        cells = np.zeros((depth, width), dtype=np.float64)
    return Sketch(kind, depth, width, seed, float(noise_scale), cells, row_seeds, sign_seeds)


def merge(a: Sketch, b: Sketch) -> Sketch:
    """Cell-wise sum of two compatible sketches; neither input is modified."""
    if not a.compatible(b):
        raise CompatibilityError("sketches differ in kind, dimensions or hash seeds")
    out = a.copy()
    out.cells = a.cells + b.cells
    # variance of the summed noise, expressed as an equivalent Laplace scale
    out.noise_scale = math.hypot(a.noise_scale, b.noise_scale)
    return out


def merge_all(sketches: Iterable[Sketch]) -> Sketch:
    it = iter(sketches)
    try:
        acc = next(it).copy()
    except StopIteration:
        raise ValueError("merge_all needs at least one sketch") from None
    for s in it:
        if not acc.compatible(s):
            raise CompatibilityError("sketches differ in kind, dimensions or hash seeds")
        acc.cells += s.cells
        acc.noise_scale = math.hypot(acc.noise_scale, s.noise_scale)
    return acc
