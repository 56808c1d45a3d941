"""Noise samplers, privacy-budget planning and private count quantiles.

Budget accounting is pure epsilon-DP with sequential composition: every
count table in a window draws Laplace noise calibrated to its share of the
window budget, and the shares add up to the window's epsilon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from hotcount.errors import BudgetExceededError, ConfigurationError

WEIGHT_MIN = 1.0
WEIGHT_MAX = 10_000.0
DEFAULT_QUANTILE = 0.01
DEFAULT_PRIVATE_QUANTILE = 0.1


# -- samplers ---------------------------------------------------------------

def uniform_open(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    if size is None:
        while u == 0.0:
            u = rng.random()
        return u
    zero = u == 0.0
    while zero.any():
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return u


def laplace_from_uniform(u, scale: float):
    """Inverse CDF of Laplace(0, scale)."""
    c = np.asarray(u, dtype=np.float64) - 0.5
    out = -scale * np.sign(c) * np.log1p(-2.0 * np.abs(c))
    return float(out) if np.ndim(out) == 0 else out


def sample_laplace(scale: float, rng: np.random.Generator) -> float:
    if not scale > 0:
        raise ValueError(f"Laplace scale must be > 0, got {scale}")
    return laplace_from_uniform(uniform_open(rng), scale)


def laplace_array(scale: float, shape, rng: np.random.Generator) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"Laplace scale must be > 0, got {scale}")
    return laplace_from_uniform(uniform_open(rng, shape), scale)


def cauchy_from_uniform(u: float, scale: float) -> float:
    return scale * math.tan(math.pi * (u - 0.5))


def sample_cauchy(scale: float, rng: np.random.Generator) -> float:
    if not scale > 0:
        raise ValueError(f"Cauchy scale must be > 0, got {scale}")
    return cauchy_from_uniform(uniform_open(rng), scale)


# -- budget planning --------------------------------------------------------

@dataclass(frozen=True)
class PrivacyConfig:
    """Per-window budget ``epsilon`` hiding any ``k`` observations.

    ``depth`` is the sketch depth (each observation touches one cell per row)
    and ``p_min`` the smallest importance probability, whose inverse bounds a
    single observation's contribution.
    """

    epsilon: float
    k: int = 1
    depth: int = 5
    p_min: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if not 0 < self.p_min <= 1:
            raise ConfigurationError(f"p_min must be in (0, 1], got {self.p_min}")

    @property
    def sensitivity(self) -> float:
        return self.depth * self.k / self.p_min


@dataclass(frozen=True)
class TableBudget:
    table_id: str
    weight: float
    epsilon: float
    scale: float


@dataclass(frozen=True)
class NoisePlan:
    entries: tuple[TableBudget, ...]

    def scale_for(self, table_id: str) -> float:
        for e in self.entries:
            if e.table_id == table_id:
                return e.scale
        raise KeyError(table_id)

    def epsilon_for(self, table_id: str) -> float:
        for e in self.entries:
            if e.table_id == table_id:
                return e.epsilon
        raise KeyError(table_id)

    @property
    def total_epsilon(self) -> float:
        return math.fsum(e.epsilon for e in self.entries)

    def table_ids(self) -> list[str]:
        return [e.table_id for e in self.entries]

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePlan":
        return cls(tuple(TableBudget(**e) for e in d["entries"]))


def build_noise_plan(
    cfg: PrivacyConfig,
    weights: Mapping[str, float] | Iterable[tuple[str, float]],
) -> NoisePlan:
    """Split ``cfg.epsilon`` across tables in proportion to ``weights``.

    Table ``i`` gets ``epsilon_i = epsilon * w_i / sum(w)`` and Laplace scale
    ``b_i = depth * k / (p_min * epsilon_i)``. Equal weights give the even split
    ``b = n * depth * k / (p_min * epsilon)``.
    """
    items = list(weights.items() if isinstance(weights, Mapping) else weights)
    if not items:
        raise ConfigurationError("a noise plan needs at least one table")
    ids = [t for t, _ in items]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate table ids in noise plan")
    for tid, w in items:
        if not (w > 0 and math.isfinite(w)):
            raise ValueError(f"table weight must be positive and finite: {tid}={w}")
    total = math.fsum(w for _, w in items)
    entries = []
    for tid, w in items:
        eps_i = cfg.epsilon * w / total
        # written so the even split is exact: b = n*h*k/(p*eps)
        scale = cfg.depth * cfg.k * total / (cfg.p_min * cfg.epsilon * w)
        entries.append(TableBudget(tid, float(w), eps_i, scale))
    return NoisePlan(tuple(entries))


def budget_shares_from_noise_weights(noise_weights: Mapping[str, float]) -> dict[str, float]:
    """Convert count-quantile weights into budget shares.

    A table whose typical counts are large tolerates proportionally more noise,
    so it receives a budget share inversely proportional to its weight; the
    resulting Laplace scale is proportional to the weight.
    """
    return {t: 1.0 / w for t, w in noise_weights.items()}


@dataclass(frozen=True)
class LedgerEntry:
    window_id: int
    purpose: str
    epsilon: float


@dataclass
class BudgetLedger:
    """Record of every epsilon expenditure, capped per window."""

    epsilon_per_window: float
    entries: list[LedgerEntry] = field(default_factory=list)

    def spent(self, window_id: int) -> float:
        return math.fsum(e.epsilon for e in self.entries if e.window_id == window_id)

    def remaining(self, window_id: int) -> float:
        return self.epsilon_per_window - self.spent(window_id)

    def spend(self, window_id: int, purpose: str, epsilon: float) -> None:
        if epsilon < 0:
            raise ValueError("cannot spend a negative budget")
        after = self.spent(window_id) + epsilon
        if after > self.epsilon_per_window * (1 + 1e-9):
            raise BudgetExceededError(
                f"window {window_id}: spending {epsilon:g} on {purpose!r} would use "
                f"{after:g} of {self.epsilon_per_window:g}"
            )
        self.entries.append(LedgerEntry(window_id, purpose, float(epsilon)))

    def to_dict(self) -> dict:
        return {
            "epsilon_per_window": self.epsilon_per_window,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetLedger":
        return cls(d["epsilon_per_window"], [LedgerEntry(**e) for e in d["entries"]])


# -- private quantiles ------------------------------------------------------

def quantile_rank(n: int, q: float) -> int:
    """1-indexed rank ``ceil(q * n)`` of quantile ``q`` in a sorted sample."""
    return min(n, max(1, math.ceil(q * n)))


def _check_quantile_input(values, q: float, upper: float) -> np.ndarray:
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise ValueError("need at least one value")
    if not 0 < q < 1:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    if not upper > 0:
        raise ValueError(f"upper bound must be > 0, got {upper}")
    if x[0] < 0 or x[-1] > upper or not np.all(np.isfinite(x)):
        raise ValueError(f"values must lie in [0, {upper}]")
    return x


def smooth_sensitivity_quantile(values, q: float, beta: float, upper: float) -> float:
    """Smooth sensitivity of the rank-``ceil(q n)`` order statistic.

    Values are sorted and padded with 0 below and ``upper`` above. The
    sensitivity at distance ``t`` is the widest gap spanning ``t + 1``
    consecutive ranks that still straddles the quantile's rank; the result is
    the maximum over ``t`` of that gap discounted by ``exp(-beta * t)``.

    The enumeration over ``t`` stops once ``exp(-beta t) * upper`` cannot beat
    the running maximum, since no gap exceeds ``upper``. At ``t = n`` the gap
    always reaches ``upper``, so ``t`` never needs to go past ``n``.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    x = _check_quantile_input(values, q, upper)
    n = x.size
    r = quantile_rank(n, q)
    padded = np.concatenate(([0.0], x, [float(upper)]))
    best = 0.0
    for t in range(n + 1):
        env = 1.0 if t == 0 else math.exp(-beta * t)
        if env * upper <= best:
            break
        idx = np.arange(r, r + t + 2)
        hi = np.minimum(idx, n + 1)
        lo = np.maximum(idx - t - 1, 0)
        gap = float(np.max(padded[hi] - padded[lo]))
        term = env * gap
        if term > best:
            best = term
    return best


def private_quantile(
    values,
    q: float,
    epsilon: float,
    upper: float,
    rng: np.random.Generator | None = None,
    *,
    noise: float | None = None,
) -> float:
    """epsilon-DP estimate of the ``q`` quantile of values in ``[0, upper]``.

    Adds Cauchy noise of scale ``2 S / epsilon`` where ``S`` is the smooth
    sensitivity at ``beta = epsilon / 6``. ``noise`` overrides the standard
    Cauchy draw (tests use 0 to recover the exact quantile).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    x = _check_quantile_input(values, q, upper)
    r = quantile_rank(x.size, q)
    s = smooth_sensitivity_quantile(x, q, epsilon / 6.0, upper)
    if noise is None:
        if rng is None:
            raise ValueError("a random generator is required")
        noise = sample_cauchy(1.0, rng)
    return float(min(max(x[r - 1] + (2.0 * s / epsilon) * noise, 0.0), upper))


def rescale_weights(raw: Mapping[str, float]) -> dict[str, float]:
    """Affine map of ``raw`` onto ``[1, 10000]``; degenerate inputs map to 1."""
    vals = list(raw.values())
    lo, hi = min(vals), max(vals)
    if len(vals) == 1 or hi == lo:
        return {f: WEIGHT_MIN for f in raw}
    span = WEIGHT_MAX - WEIGHT_MIN
    return {f: WEIGHT_MIN + (v - lo) / (hi - lo) * span for f, v in raw.items()}


def compute_weights(
    per_feature_counts: Mapping[str, Sequence[float]],
    q: float = DEFAULT_PRIVATE_QUANTILE,
    epsilon: float = 1.0,
    upper: float = 1.0,
    rng: np.random.Generator | None = None,
    *,
    noise: Mapping[str, float] | float | None = None,
) -> dict[str, float]:
    """Private per-feature count quantiles rescaled onto ``[1, 10000]``.

    The budget ``epsilon`` is split evenly across features. ``upper`` bounds
    every count and is normally the window size.
    """
    if not per_feature_counts:
        raise ValueError("no features given")
    share = epsilon / len(per_feature_counts)
    raw = {}
    for f in sorted(per_feature_counts):
        counts = per_feature_counts[f]
        if len(counts) == 0:
            raise ValueError(f"feature {f!r} has no counts")
        eta = noise.get(f) if isinstance(noise, Mapping) else noise
        raw[f] = private_quantile(counts, q, share, upper, rng, noise=eta)
    return rescale_weights(raw)


def count_quantile_weights(
    per_feature_counts: Mapping[str, Sequence[float]], q: float = DEFAULT_QUANTILE
) -> dict[str, float]:
    """Non-private weights: the ``q`` quantile of each feature's counts, clipped to ``[1, 10000]``."""
    out = {}
    for f, counts in per_feature_counts.items():
        x = np.sort(np.asarray(counts, dtype=np.float64))
        if x.size == 0:
            raise ValueError(f"feature {f!r} has no counts")
        out[f] = min(max(WEIGHT_MIN, float(x[quantile_rank(x.size, q) - 1])), WEIGHT_MAX)
    return out


@dataclass(frozen=True)
class WeightEstimate:
    weight: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"noise scale must be > 0, got {self.scale}")


def merge_weight_estimates(estimates: Iterable[WeightEstimate | tuple[float, float]]) -> float:
    """Inverse-variance weighted mean of per-window weight estimates."""
    ests = [e if isinstance(e, WeightEstimate) else WeightEstimate(*e) for e in estimates]
    if not ests:
        raise ValueError("need at least one estimate")
    if len(ests) == 1:
        return ests[0].weight
    num = math.fsum(e.weight / e.scale**2 for e in ests)
    den = math.fsum(1.0 / e.scale**2 for e in ests)
    return num / den
