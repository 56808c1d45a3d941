"""Hot window, windowed count tables and retention.

Observations land in two places: the hot window (raw, plaintext, small) and
the count tables of the single populating window. Rolling seals the
populating window into the featurization view, expires windows past the
retention horizon and opens a fresh window whose tables start from Laplace
noise. In dyadic-tree mode every aligned block of ``2**j`` windows also has
its own noised tables, so any retained range is the sum of O(log W) nodes.
"""

from __future__ import annotations

import collections
import enum
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from hotcount import kernels
from hotcount.errors import ConfigurationError, StateError
from hotcount.privacy import (
    DEFAULT_PRIVATE_QUANTILE,
    DEFAULT_QUANTILE,
    BudgetLedger,
    NoisePlan,
    PrivacyConfig,
    budget_shares_from_noise_weights,
    build_noise_plan,
    compute_weights,
    count_quantile_weights,
    laplace_array,
)
from hotcount.sketch import DEFAULT_DEPTH, DEFAULT_WIDTH, SketchKind
from hotcount.tables import (
    BackoffConfig,
    CountTable,
    CountView,
    FeatureSchema,
    FeaturizedVector,
    Observation,
    check_observation,
    featurize_batch,
    group_id,
    merge_tables,
    normalize_group,
    table_keys,
)


class RetentionMode(enum.Enum):
    FLAT = "flat"
    DYADIC_TREE = "dyadic_tree"


class WindowStatus(enum.Enum):
    POPULATING = "populating"
    SEALED = "sealed"
    EXPIRED = "expired"


class Weighting(enum.Enum):
    EVEN = "even"
    WEIGHTED = "weighted"
    PRIVATE = "private"


@dataclass
class RetentionPolicy:
    """Sizes of the hot window and of count windows.

    The hot window is bounded by ``hot_capacity`` observations and/or
    ``hot_duration`` time units. Count windows roll automatically after
    ``window_length`` observations or ``window_duration`` time units; with
    neither set they roll only on request.
    """

    hot_capacity: int | None = 10_000
    hot_duration: float | None = None
    window_length: int | None = None
    window_duration: float | None = None
    retention: int = 10
    mode: RetentionMode = RetentionMode.FLAT
    retrain_on_seal: bool = True

    def __post_init__(self):
        self.mode = RetentionMode(self.mode)
        if self.retention < 1:
            raise ConfigurationError("retention must keep at least one window")
        if self.hot_capacity is None and self.hot_duration is None:
            raise ConfigurationError("the hot window needs a capacity or a duration")
        for name in ("hot_capacity", "hot_duration", "window_length", "window_duration"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be > 0")

    @property
    def tree_levels(self) -> int:
        return int(math.floor(math.log2(self.retention))) + 1


@dataclass
class SketchConfig:
    kind: SketchKind = SketchKind.COUNT_MIN
    depth: int = DEFAULT_DEPTH
    width: int = DEFAULT_WIDTH
    seed: int = 0

    def __post_init__(self):
        self.kind = SketchKind(self.kind)


@dataclass
class EngineConfig:
    """Engine knobs. ``privacy=None`` disables noise entirely."""

    sketch: SketchConfig = field(default_factory=SketchConfig)
    privacy: PrivacyConfig | None = None
    backoff: BackoffConfig = field(default_factory=BackoffConfig)
    weighting: Weighting = Weighting.EVEN
    weight_quantile: float | None = None
    # shares of each window's epsilon
    prior_fraction: float = 0.02
    group_fraction: float = 0.1
    weights_fraction: float = 1.0
    # left unspent in every window for on-demand releases such as private weights
    reserve_fraction: float = 0.0

    def __post_init__(self):
        self.weighting = Weighting(self.weighting)
        if self.weight_quantile is None:
            self.weight_quantile = (
                DEFAULT_PRIVATE_QUANTILE if self.weighting is Weighting.PRIVATE else DEFAULT_QUANTILE
            )
        for name in ("prior_fraction", "group_fraction", "reserve_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be in [0, 1)")
        if not 0 < self.weights_fraction <= 1:
            raise ConfigurationError("weights_fraction must be in (0, 1]")
        if self.privacy is not None and self.privacy.depth != self.sketch.depth:
            raise ConfigurationError("privacy depth must equal the sketch depth")


@dataclass
class Window:
    """A set of count tables covering windows ``first..last``.

    Plain windows have ``first == last`` and ``level == 0``; dyadic tree
    nodes at level ``j`` cover ``2**j`` aligned windows.
    """

    window_id: int
    status: WindowStatus
    tables: dict[str, CountTable]
    label_totals: np.ndarray
    level: int = 0
    start_ts: float | None = None
    end_ts: float | None = None
    n_obs: int = 0
    plan: NoisePlan | None = None

    @property
    def first(self) -> int:
        return self.window_id << self.level

    @property
    def last(self) -> int:
        return ((self.window_id + 1) << self.level) - 1

    def freeze(self) -> None:
        for t in self.tables.values():
            t.freeze()
        self.label_totals.flags.writeable = False


@dataclass(frozen=True)
class RetrainEvent:
    reason: str
    expired_window_ids: tuple[int, ...]
    sealed_window_id: int | None
    emitted_at: float
    version: int

    def to_dict(self) -> dict:
        return {
            "reason": self.reason,
            "expired_window_ids": list(self.expired_window_ids),
            "sealed_window_id": self.sealed_window_id,
            "emitted_at": self.emitted_at,
            "version": self.version,
        }


def dyadic_cover(first: int, last: int, max_level: int | None = None) -> list[tuple[int, int]]:
    """Minimal tiling of ``[first, last]`` by aligned power-of-two blocks.

    Returns ``(level, index)`` pairs; node ``(j, m)`` covers windows
    ``m * 2**j .. (m + 1) * 2**j - 1``.
    """
    if first < 0 or last < first:
        raise ValueError(f"invalid window range [{first}, {last}]")
    out = []
    i = first
    while i <= last:
        j = 0
        while True:
            size = 1 << (j + 1)
            if i % size or i + size - 1 > last or (max_level is not None and j + 1 > max_level):
                break
            j += 1
        out.append((j, i >> j))
        i += 1 << j
    return out


def node_range(level: int, index: int) -> tuple[int, int]:
    return index << level, ((index + 1) << level) - 1


def table_seed(base: int, table_id: str) -> int:
    return kernels.mix64(base ^ kernels.fingerprint(table_id.encode("utf-8")))


class Engine:
    """Single coordinator for ingestion, rolling and view construction."""

    def __init__(
        self,
        schema: FeatureSchema,
        policy: RetentionPolicy | None = None,
        config: EngineConfig | None = None,
        seed: int | None = None,
        noise_weights: Mapping[str, float] | None = None,
    ):
        self._init_empty(schema, policy or RetentionPolicy(), config or EngineConfig(), seed)
        if noise_weights:
            self.set_noise_weights(noise_weights)
        self.current: Window = self._open_window(0, None)

    def _init_empty(
        self,
        schema: FeatureSchema,
        policy: RetentionPolicy,
        config: EngineConfig,
        seed: int | None = None,
    ) -> None:
        self.schema = schema
        self.policy = policy
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.groups: list[tuple[str, ...]] = list(schema.groups)
        self._pending_groups: list[tuple[str, ...]] | None = None
        self.noise_weights: dict[str, float] = {}
        priv = self.config.privacy
        self.ledger = BudgetLedger(priv.epsilon if priv else 0.0)
        self.hot: collections.deque[Observation] = collections.deque()
        self.windows: dict[int, Window] = {}
        self.nodes: dict[tuple[int, int], Window] = {}
        self.expired_ids: list[int] = []
        self.version = 0
        self.listeners: list[Callable[[RetrainEvent], Any]] = []
        self.events: list[RetrainEvent] = []
        self._lock = threading.RLock()
        self._view_cache: CountView | None = None
        self._calibration: dict[str, collections.Counter] | None = None

    # -- window construction ------------------------------------------------

    @property
    def noisy(self) -> bool:
        return self.config.privacy is not None

    def table_ids(self) -> list[str]:
        return self.schema.table_ids(self.groups)

    def _budget_shares(self, ids: Sequence[str]) -> dict[str, float]:
        groups = [t for t in ids if t not in self.schema.feature_names]
        feats = [t for t in ids if t in self.schema.feature_names]
        nw = {t: self.noise_weights.get(t, 1.0) for t in ids}
        shares = budget_shares_from_noise_weights(nw)
        gf = self.config.group_fraction if groups else 0.0
        fsum = sum(shares[t] for t in feats)
        out = {t: (1 - gf) * shares[t] / fsum for t in feats}
        if groups:
            gsum = sum(shares[t] for t in groups)
            out.update({t: gf * shares[t] / gsum for t in groups})
        return out

    def _make_tables(
        self, window_id: int, level: int, epsilon: float | None, purpose: str
    ) -> tuple[dict[str, CountTable], np.ndarray, NoisePlan | None]:
        sk = self.config.sketch
        ids = self.table_ids()
        n_labels = self.schema.n_labels
        plan = None
        scales = {t: 0.0 for t in ids}
        totals = np.zeros(n_labels)
        if epsilon is not None:
            priv = self.config.privacy
            eps_prior = epsilon * self.config.prior_fraction
            eps_tables = epsilon - eps_prior
            plan = build_noise_plan(
                PrivacyConfig(eps_tables, priv.k, priv.depth, priv.p_min), self._budget_shares(ids)
            )
            scales = {e.table_id: e.scale for e in plan.entries}
            for e in plan.entries:
                self.ledger.spend(window_id, f"{purpose}table:{e.table_id}", e.epsilon)
            if eps_prior > 0:
                totals = laplace_array(priv.k / (priv.p_min * eps_prior), n_labels, self.rng)
                self.ledger.spend(window_id, f"{purpose}label_totals", eps_prior)
        tables = {
            t: CountTable.create(
                t, n_labels, sk.kind, sk.depth, sk.width, table_seed(sk.seed, t), scales[t], self.rng
            )
            for t in ids
        }
        return tables, totals, plan

    def _open_window(self, window_id: int, ts: float | None) -> Window:
        priv = self.config.privacy
        calibrating = (
            window_id == 0 and priv is not None and self.config.weighting is Weighting.PRIVATE
            and not self.noise_weights
        )
        if calibrating:
            # this window only measures count quantiles for the noise weights
            self._calibration = {f: collections.Counter() for f in self.schema.feature_names}
            w = Window(window_id, WindowStatus.POPULATING, {}, np.zeros(self.schema.n_labels), start_ts=ts)
            return w
        if priv is not None and self.config.weighting is Weighting.WEIGHTED:
            self._refresh_hot_weights()
        tree = self.policy.mode is RetentionMode.DYADIC_TREE
        levels = self.policy.tree_levels if tree else 1
        eps = None if priv is None else priv.epsilon * (1 - self.config.reserve_fraction) / levels
        tables, totals, plan = self._make_tables(window_id, 0, eps, "level0:" if tree else "")
        w = Window(window_id, WindowStatus.POPULATING, tables, totals, start_ts=ts, plan=plan)
        if tree:
            for j in range(1, levels):
                if window_id % (1 << j) == 0:
                    t2, tot2, plan2 = self._make_tables(window_id, j, eps, f"level{j}:")
                    self.nodes[(j, window_id >> j)] = Window(
                        window_id >> j, WindowStatus.POPULATING, t2, tot2, level=j, start_ts=ts, plan=plan2
                    )
                else:
                    # the open node was created at its first window; charge this window too
                    node = self.nodes.get((j, window_id >> j))
                    if node is not None and node.plan is not None:
                        for e in node.plan.entries:
                            self.ledger.spend(window_id, f"level{j}:table:{e.table_id}", e.epsilon)
                        eps_prior = eps * self.config.prior_fraction
                        if eps_prior > 0:
                            self.ledger.spend(window_id, f"level{j}:label_totals", eps_prior)
        return w

    def _open_nodes(self, window_id: int) -> list[Window]:
        if self.policy.mode is not RetentionMode.DYADIC_TREE:
            return []
        out = []
        for j in range(1, self.policy.tree_levels):
            node = self.nodes.get((j, window_id >> j))
            if node is not None and node.status is WindowStatus.POPULATING:
                out.append(node)
        return out

    # -- ingestion ----------------------------------------------------------

    def observe(self, obs: Observation) -> list[RetrainEvent]:
        return self.observe_many([obs])

    def observe_many(self, observations: Iterable[Observation]) -> list[RetrainEvent]:
        """Ingest observations; returns retrain events from automatic rolls."""
        emitted: list[RetrainEvent] = []
        batch: list[Observation] = []
        with self._lock:
            for obs in observations:
                check_observation(self.schema, obs)
                pol = self.policy
                if (
                    pol.window_duration is not None
                    and self.current.start_ts is not None
                    and obs.timestamp >= self.current.start_ts + pol.window_duration
                ):
                    self._ingest(batch)
                    batch = []
                    ev = self._roll(obs.timestamp)
                    if ev:
                        emitted.append(ev)
                if self.current.start_ts is None:
                    self.current.start_ts = obs.timestamp
                batch.append(obs)
                self.current.n_obs += 1
                self._push_hot(obs)
                if pol.window_length is not None and self.current.n_obs >= pol.window_length:
                    self._ingest(batch)
                    batch = []
                    ev = self._roll(obs.timestamp)
                    if ev:
                        emitted.append(ev)
            self._ingest(batch)
        return emitted

    def _push_hot(self, obs: Observation) -> None:
        self.hot.append(obs)
        cap = self.policy.hot_capacity
        if cap is not None:
            while len(self.hot) > cap:
                self.hot.popleft()
        dur = self.policy.hot_duration
        if dur is not None:
            while self.hot and self.hot[0].timestamp < obs.timestamp - dur:
                self.hot.popleft()

    def _ingest(self, batch: Sequence[Observation]) -> None:
        if not batch:
            return
        labels = np.array([self.schema.label_index(o.label) for o in batch])
        deltas = np.array([1.0 / o.p for o in batch])
        if self._calibration is not None and not self.current.tables:
            for o in batch:
                for f, c in self._calibration.items():
                    c[self.schema.discretize(f, o.values[f])] += 1
            return
        targets = [self.current] + self._open_nodes(self.current.window_id)
        ids = self.table_ids()
        keys = [table_keys(self.schema, o.values, ids) for o in batch]
        for w in targets:
            for j, tid in enumerate(ids):
                t = w.tables.get(tid)
                if t is not None:
                    t.update_many([k[j] for k in keys], labels, deltas)
            np.add.at(w.label_totals, labels, deltas)

    # -- rolling ------------------------------------------------------------

    def roll_window(self, ts: float | None = None) -> RetrainEvent | None:
        """Seal the populating window, expire old ones and open a new one."""
        with self._lock:
            return self._roll(ts)

    def _roll(self, ts: float | None) -> RetrainEvent | None:
        cur = self.current
        cur.end_ts = ts
        cur.status = WindowStatus.SEALED
        cur.freeze()
        sealed_id = cur.window_id
        calibrated = False
        if self._calibration is not None and not cur.tables:
            self._finish_calibration(cur)
            calibrated = True
        else:
            self.windows[sealed_id] = cur
        for (j, m), node in self.nodes.items():
            if node.status is WindowStatus.POPULATING and node_range(j, m)[1] == sealed_id:
                node.status = WindowStatus.SEALED
                node.end_ts = ts
                node.freeze()
        expired = self._expire(sealed_id)
        if self._pending_groups is not None:
            self.groups = self._pending_groups
            self._pending_groups = None
        self.version += 1
        self._view_cache = None
        self.current = self._open_window(sealed_id + 1, ts)
        if expired:
            ev = RetrainEvent("window_expired", tuple(expired), sealed_id, time.time(), self.version)
        elif self.policy.retrain_on_seal and not calibrated:
            ev = RetrainEvent("window_sealed", (), sealed_id, time.time(), self.version)
        else:
            ev = None
        if ev is not None:
            self.events.append(ev)
            for cb in list(self.listeners):
                cb(ev)
        return ev

    def retained_range(self) -> tuple[int, int] | None:
        """Ids of the first and last sealed windows feeding the view."""
        ids = sorted(self.windows)
        return (ids[0], ids[-1]) if ids else None

    def _expire(self, newest: int) -> list[int]:
        first = newest - self.policy.retention + 1
        gone = sorted(w for w in self.windows if w < first)
        for w in gone:
            win = self.windows.pop(w)
            win.status = WindowStatus.EXPIRED
            win.tables.clear()
            self.expired_ids.append(w)
        for key in [k for k, n in self.nodes.items() if n.first < first]:
            node = self.nodes.pop(key)
            node.status = WindowStatus.EXPIRED
            node.tables.clear()
        return gone

    # -- noise weights ------------------------------------------------------

    def set_noise_weights(self, weights: Mapping[str, float]) -> None:
        """Per-table noise weights for windows opened from now on.

        A table's Laplace scale is proportional to its weight.
        """
        for t, w in weights.items():
            if not w > 0:
                raise ValueError(f"noise weight must be > 0: {t}={w}")
        self.noise_weights = dict(weights)

    def hot_value_counts(self) -> dict[str, list[int]]:
        """Exact per-value occurrence counts of each feature in the hot window."""
        out = {}
        for f in self.schema.feature_names:
            c = collections.Counter(self.schema.discretize(f, o.values[f]) for o in self.hot)
            out[f] = list(c.values())
        return out

    def _refresh_hot_weights(self) -> None:
        counts = {f: c for f, c in self.hot_value_counts().items() if c}
        if counts:
            self.noise_weights = count_quantile_weights(counts, self.config.weight_quantile)

    def compute_noise_weights(
        self,
        private: bool = False,
        quantile: float | None = None,
        epsilon: float | None = None,
        apply: bool = False,
    ) -> dict[str, float]:
        """Noise weights from the hot window's per-value counts.

        The private variant is charged to the populating window's ledger and
        fails with :class:`BudgetExceededError` unless ``reserve_fraction`` left
        room for it.
        """
        with self._lock:
            counts = {f: c for f, c in self.hot_value_counts().items() if c}
            if not counts:
                raise StateError("hot window is empty")
            if private:
                q = DEFAULT_PRIVATE_QUANTILE if quantile is None else quantile
                if epsilon is None:
                    raise ValueError("private weights need an epsilon")
                if self.noisy:
                    self.ledger.spend(self.current.window_id, "weights", epsilon)
                weights = compute_weights(counts, q, epsilon, float(len(self.hot)), self.rng)
            else:
                q = DEFAULT_QUANTILE if quantile is None else quantile
                weights = count_quantile_weights(counts, q)
            if apply:
                self.set_noise_weights(weights)
            return weights

    def _finish_calibration(self, window: Window) -> None:
        priv = self.config.privacy
        eps = priv.epsilon * self.config.weights_fraction
        counts = {f: list(c.values()) for f, c in self._calibration.items() if c}
        self._calibration = None
        if counts:
            self.ledger.spend(window.window_id, "weights", eps)
            self.noise_weights = compute_weights(
                counts, self.config.weight_quantile, eps, float(max(window.n_obs, 1)), self.rng
            )
        self.expired_ids.append(window.window_id)
        window.status = WindowStatus.EXPIRED

    # -- groups -------------------------------------------------------------

    def add_groups(self, groups: Iterable[Sequence[str]]) -> None:
        """Start counting ``groups`` from the next window on (trial basis)."""
        with self._lock:
            cur = list(self._pending_groups if self._pending_groups is not None else self.groups)
            for g in groups:
                g = normalize_group(g, self.schema.feature_names)
                if g not in cur:
                    cur.append(g)
            self._pending_groups = cur

    def drop_groups(self, groups: Iterable[Sequence[str]]) -> None:
        """Stop counting ``groups`` at the next roll. Declared schema groups stay."""
        with self._lock:
            drop = {normalize_group(g) for g in groups} - set(self.schema.groups)
            cur = self._pending_groups if self._pending_groups is not None else self.groups
            self._pending_groups = [g for g in cur if g not in drop]

    # -- views --------------------------------------------------------------

    def aggregate_view(self) -> CountView:
        """Merged, read-only count tables of the retained sealed windows."""
        with self._lock:
            if self._view_cache is not None:
                return self._view_cache
            view = self._build_view()
            self._view_cache = view
            return view

    def _view_sources(self) -> list[Window]:
        ids = sorted(self.windows)
        if not ids:
            return []
        if self.policy.mode is RetentionMode.FLAT:
            return [self.windows[i] for i in ids]
        first, last = ids[0], ids[-1]
        out = []
        for j, m in dyadic_cover(first, last, self.policy.tree_levels - 1):
            out.append(self.windows[m] if j == 0 else self.nodes[(j, m)])
        return out

    def _build_view(self) -> CountView:
        sources = self._view_sources()
        n_labels = self.schema.n_labels
        if not sources:
            return CountView.empty(n_labels, self.version)
        tables = {}
        for tid in self.table_ids() + [t for s in sources for t in s.tables]:
            if tid in tables:
                continue
            parts = [s.tables[tid] for s in sources if tid in s.tables]
            if parts:
                tables[tid] = merge_tables(parts).freeze()
        totals = np.zeros(n_labels)
        for s in sources:
            totals = totals + s.label_totals
        totals.flags.writeable = False
        ids = tuple(sorted({w for s in sources for w in range(s.first, s.last + 1)}))
        return CountView(tables, totals, ids, self.version)

    def featurize(self, x: Mapping[str, Any]) -> FeaturizedVector:
        return self.featurize_many([x])[0]

    def featurize_many(self, rows: Sequence[Mapping[str, Any]]) -> list[FeaturizedVector]:
        view = self.aggregate_view()
        return featurize_batch(self.schema, view, rows, self.groups, self.config.backoff)

    def get_train_set(self) -> list[tuple[FeaturizedVector, str, float]]:
        """Every hot-window observation featurized against the current view."""
        with self._lock:
            hot = list(self.hot)
            view = self.aggregate_view()
            groups = list(self.groups)
        vecs = featurize_batch(self.schema, view, [o.values for o in hot], groups, self.config.backoff)
        return [(v, str(o.label), o.p) for v, o in zip(vecs, hot)]

    def sealed_windows(self) -> list[Window]:
        return [self.windows[i] for i in sorted(self.windows)]
