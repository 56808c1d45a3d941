"""Feature schema, count tables and count featurization.

A count table holds one sketch per label value; the sketch for label ``l``
counts how often each feature value co-occurred with ``l``. Featurizing a
value replaces it with the per-label conditional probabilities read from
the table, falling back to the label prior when the counts are too thin to
trust.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from hotcount.errors import CompatibilityError, ConfigurationError, SchemaError
from hotcount.privacy import quantile_rank
from hotcount.sketch import Sketch, SketchKind, merge_all, new_sketch

GROUP_SEP = "+"
DEFAULT_BINS = 4
DEFAULT_RAW_CARDINALITY = 32
DEFAULT_N_MIN = 20.0
DEFAULT_V_MAX = 0.0125


class FeatureKind(enum.Enum):
    CATEGORICAL = "categorical"
    CONTINUOUS = "continuous"


# -- binning ----------------------------------------------------------------

@dataclass(frozen=True)
class BinBoundaries:
    """Upper edges of every bin but the last; bin ``i`` is ``(edge[i-1], edge[i]]``."""

    edges: tuple[float, ...]

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1


def bin_continuous(training_values: Iterable[float], bins: int = DEFAULT_BINS) -> BinBoundaries:
    """Equal-frequency bin edges at the ``j / bins`` empirical quantiles."""
    x = np.sort(np.asarray(list(training_values), dtype=np.float64))
    if x.size == 0:
        raise ValueError("cannot bin an empty sample")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    edges = tuple(float(x[quantile_rank(x.size, j / bins) - 1]) for j in range(1, bins))
    return BinBoundaries(edges)


def apply_bin(b: BinBoundaries, v: float) -> int:
    return bisect.bisect_left(b.edges, v)


# -- schema -----------------------------------------------------------------

@dataclass
class FeatureSpec:
    name: str
    kind: FeatureKind = FeatureKind.CATEGORICAL
    bins: BinBoundaries | None = None
    # declared domain, used only to decide raw passthrough
    values: tuple[str, ...] | None = None


@dataclass
class FeatureSchema:
    features: list[FeatureSpec]
    label: str
    label_values: tuple[str, ...]
    groups: list[tuple[str, ...]] = field(default_factory=list)
    bins_per_continuous: int = DEFAULT_BINS
    include_raw_below_cardinality: int = DEFAULT_RAW_CARDINALITY

    def __post_init__(self):
        self.label_values = tuple(str(v) for v in self.label_values)
        if len(self.label_values) < 2:
            raise SchemaError("a label needs at least two values")
        if len(set(self.label_values)) != len(self.label_values):
            raise SchemaError("label values must be distinct")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        for n in names:
            if GROUP_SEP in n or not n:
                raise SchemaError(f"invalid feature name {n!r}")
        if self.label in names:
            raise SchemaError("label column shadows a feature")
        self.groups = [normalize_group(g, names) for g in self.groups]
        if len(set(self.groups)) != len(self.groups):
            raise SchemaError("duplicate groups")
        self._by_name = {f.name: f for f in self.features}
        self._label_index = {v: i for i, v in enumerate(self.label_values)}

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def n_labels(self) -> int:
        return len(self.label_values)

    def feature(self, name: str) -> FeatureSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def label_index(self, label: Any) -> int:
        try:
            return self._label_index[str(label)]
        except KeyError:
            raise SchemaError(f"unknown label value {label!r}") from None

    def table_ids(self, extra_groups: Iterable[tuple[str, ...]] = ()) -> list[str]:
        ids = self.feature_names + [group_id(g) for g in self.groups]
        for g in extra_groups:
            gid = group_id(g)
            if gid not in ids:
                ids.append(gid)
        return ids

    def discretize(self, name: str, value: Any) -> str:
        spec = self.feature(name)
        if spec.kind is FeatureKind.CONTINUOUS:
            if spec.bins is None:
                raise SchemaError(f"continuous feature {name!r} has no bin edges; fit them first")
            return str(apply_bin(spec.bins, float(value)))
        return str(value)

    def raw_passthrough(self) -> list[str]:
        limit = self.include_raw_below_cardinality
        return [
            f.name for f in self.features
            if f.kind is FeatureKind.CATEGORICAL and f.values is not None and len(f.values) < limit
        ]

    def fit_bins(self, rows: Iterable[Mapping[str, Any]]) -> None:
        """Fill in missing bin edges for continuous features from ``rows``."""
        todo = [f for f in self.features if f.kind is FeatureKind.CONTINUOUS and f.bins is None]
        if not todo:
            return
        cols: dict[str, list[float]] = {f.name: [] for f in todo}
        for row in rows:
            for name in cols:
                cols[name].append(float(row[name]))
        for f in todo:
            f.bins = bin_continuous(cols[f.name], self.bins_per_continuous)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            d: dict[str, Any] = {"name": f.name, "kind": f.kind.value}
            if f.bins is not None:
                d["bin_edges"] = list(f.bins.edges)
            if f.values is not None:
                d["values"] = list(f.values)
            feats.append(d)
        return {
            "features": feats,
            "label": {"name": self.label, "values": list(self.label_values)},
            "groups": [list(g) for g in self.groups],
            "bins_per_continuous": self.bins_per_continuous,
            "include_raw_below_cardinality": self.include_raw_below_cardinality,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        try:
            feats = []
            for f in d["features"]:
                if isinstance(f, str):
                    f = {"name": f}
                edges = f.get("bin_edges")
                vals = f.get("values")
                feats.append(FeatureSpec(
                    name=f["name"],
                    kind=FeatureKind(f.get("kind", "categorical")),
                    bins=BinBoundaries(tuple(float(e) for e in edges)) if edges is not None else None,
                    values=tuple(str(v) for v in vals) if vals is not None else None,
                ))
            label = d["label"]
            return cls(
                features=feats,
                label=label["name"],
                label_values=tuple(label["values"]),
                groups=[tuple(g) for g in d.get("groups", [])],
                bins_per_continuous=int(d.get("bins_per_continuous", DEFAULT_BINS)),
                include_raw_below_cardinality=int(
                    d.get("include_raw_below_cardinality", DEFAULT_RAW_CARDINALITY)
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed schema document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def normalize_group(members: Iterable[str], known: Sequence[str] | None = None) -> tuple[str, ...]:
    g = tuple(sorted(set(members)))
    if len(g) < 2:
        raise SchemaError(f"a group needs at least two distinct features: {members!r}")
    if known is not None:
        missing = [m for m in g if m not in known]
        if missing:
            raise SchemaError(f"group names undeclared features: {missing}")
    return g


def group_id(members: Sequence[str]) -> str:
    return GROUP_SEP.join(members)


def members_of(table_id: str) -> tuple[str, ...]:
    return tuple(table_id.split(GROUP_SEP))


def group_key(parts: Sequence[str]) -> bytes:
    """Length-prefixed join, so ("ab", "c") and ("a", "bc") never collide."""
    out = bytearray()
    for p in parts:
        b = p.encode("utf-8")
        out += len(b).to_bytes(4, "little")
        out += b
    return bytes(out)


@dataclass
class Observation:
    values: dict[str, Any]
    label: Any
    p: float = 1.0
    timestamp: float = 0.0

    def __post_init__(self):
        if not (0 < self.p <= 1):
            raise ValueError(f"importance probability must be in (0, 1], got {self.p}")

    def to_dict(self) -> dict:
        return {"values": self.values, "label": self.label, "p": self.p, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Observation":
        return cls(dict(d["values"]), d["label"], float(d.get("p", 1.0)), float(d.get("timestamp", 0.0)))


def check_observation(schema: FeatureSchema, obs: Observation) -> None:
    missing = [n for n in schema.feature_names if n not in obs.values]
    if missing:
        raise SchemaError(f"observation is missing features {missing}")
    schema.label_index(obs.label)


def table_keys(schema: FeatureSchema, values: Mapping[str, Any], table_ids: Sequence[str]) -> list[bytes]:
    """Sketch key of ``values`` for each table id."""
    disc = {}
    keys = []
    for tid in table_ids:
        members = members_of(tid)
        for m in members:
            if m not in disc:
                if m not in values:
                    raise SchemaError(f"missing feature {m!r}")
                disc[m] = schema.discretize(m, values[m])
        if len(members) == 1:
            keys.append(disc[members[0]].encode("utf-8"))
        else:
            keys.append(group_key([disc[m] for m in members]))
    return keys


# -- count tables -----------------------------------------------------------

@dataclass(eq=False)
class CountTable:
    """Per-label sketches for one feature or feature group."""

    table_id: str
    per_label: list[Sketch]

    @classmethod
    def create(
        cls,
        table_id: str,
        n_labels: int,
        kind: SketchKind,
        depth: int,
        width: int,
        seed: int,
        noise_scale: float,
        rng: np.random.Generator | None,
    ) -> "CountTable":
        # all labels share hash seeds so the table can be merged label-wise
        return cls(table_id, [
            new_sketch(kind, depth, width, seed, noise_scale, rng) for _ in range(n_labels)
        ])

    @property
    def n_labels(self) -> int:
        return len(self.per_label)

    def update(self, key: bytes, label_index: int, p: float = 1.0) -> None:
        if not (0 < p <= 1):
            raise ValueError(f"importance probability must be in (0, 1], got {p}")
        self.per_label[label_index].update(key, 1.0 / p)

    def update_many(self, keys: Sequence[bytes], label_indices: Sequence[int], deltas: np.ndarray) -> None:
        label_indices = np.asarray(label_indices)
        for li, sk in enumerate(self.per_label):
            sel = np.flatnonzero(label_indices == li)
            if sel.size:
                sk.update_many([keys[i] for i in sel], deltas[sel])

    def estimates(self, key: bytes) -> np.ndarray:
        return np.array([sk.estimate(key) for sk in self.per_label])

    def estimates_many(self, keys: Sequence[bytes]) -> np.ndarray:
        """Array of shape (n_keys, n_labels)."""
        return np.stack([sk.estimate_many(keys) for sk in self.per_label], axis=1)

    def freeze(self) -> "CountTable":
        for sk in self.per_label:
            sk.freeze()
        return self

    def copy(self) -> "CountTable":
        return CountTable(self.table_id, [sk.copy() for sk in self.per_label])

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for sk in self.per_label:
            h.update(np.ascontiguousarray(sk.cells).tobytes())
        return h.hexdigest()


def merge_tables(tables: Sequence[CountTable]) -> CountTable:
    if not tables:
        raise ValueError("nothing to merge")
    tid = tables[0].table_id
    if any(t.table_id != tid or t.n_labels != tables[0].n_labels for t in tables):
        raise CompatibilityError("count tables differ in id or label count")
    return CountTable(tid, [merge_all(t.per_label[i] for t in tables) for i in range(tables[0].n_labels)])


# -- featurization ----------------------------------------------------------

@dataclass(frozen=True)
class BackoffConfig:
    """Thresholds below which a conditional estimate is replaced by the prior."""

    n_min: float = DEFAULT_N_MIN
    v_max: float = DEFAULT_V_MAX


def conditional_probabilities(
    counts: Sequence[float],
    prior: Sequence[float],
    backoff: BackoffConfig = BackoffConfig(),
) -> tuple[np.ndarray, bool]:
    """Per-label ``P(label | value)`` from (possibly noisy) per-label counts.

    Negative counts are clamped to zero. When the clamped total is below
    ``n_min`` or the binomial variance ``p(1 - p) / N`` of any label exceeds
    ``v_max`` the prior is returned instead, flagged as backed off.
    """
    probs, backed = conditional_probabilities_batch(np.asarray(counts, dtype=np.float64)[None, :], prior, backoff)
    return probs[0], bool(backed[0])


def conditional_probabilities_batch(
    counts: np.ndarray,
    prior: Sequence[float],
    backoff: BackoffConfig = BackoffConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`conditional_probabilities` for an (n, labels) count array."""
    c = np.maximum(np.asarray(counts, dtype=np.float64), 0.0)
    total = c.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    p = c / safe[:, None]
    var = p * (1.0 - p) / safe[:, None]
    backed = (total <= 0) | (total < backoff.n_min) | np.any(var > backoff.v_max, axis=1)
    p = np.clip(p, 0.0, 1.0)
    p = p / np.where(backed, 1.0, p.sum(axis=1))[:, None]
    out = np.where(backed[:, None], np.asarray(prior, dtype=np.float64)[None, :], p)
    return out, backed


@dataclass
class CountView:
    """Read-only merged count tables plus noisy label totals.

    This is what featurization reads: the sum of every sealed window in the
    retained range. The populating window is never part of a view.
    """

    tables: dict[str, CountTable]
    label_totals: np.ndarray
    window_ids: tuple[int, ...] = ()
    version: int = 0

    @classmethod
    def empty(cls, n_labels: int, version: int = 0) -> "CountView":
        return cls({}, np.zeros(n_labels), (), version)

    def prior(self) -> np.ndarray:
        t = np.maximum(self.label_totals, 0.0)
        s = t.sum()
        if s <= 0:
            return np.full(t.size, 1.0 / t.size)
        return t / s

    def estimates(self, table_id: str, key: bytes) -> np.ndarray | None:
        t = self.tables.get(table_id)
        return None if t is None else t.estimates(key)


@dataclass
class FeaturizedVector:
    entries: list[tuple[str, str, float]]
    backoff_flags: dict[str, bool]
    raw: dict[str, Any] = field(default_factory=dict)

    def probabilities(self) -> np.ndarray:
        return np.array([p for _, _, p in self.entries])

    def block(self, source: str) -> np.ndarray:
        return np.array([p for s, _, p in self.entries if s == source])

    @property
    def sources(self) -> list[str]:
        return list(self.backoff_flags)

    def to_dict(self) -> dict:
        return {
            "entries": [{"source": s, "label": l, "probability": p} for s, l, p in self.entries],
            "backoff": self.backoff_flags,
            "raw": self.raw,
        }


def featurize(
    schema: FeatureSchema,
    view: CountView,
    x: Mapping[str, Any],
    groups: Sequence[tuple[str, ...]] | None = None,
    backoff: BackoffConfig = BackoffConfig(),
) -> FeaturizedVector:
    """Replace each feature and group of ``x`` with its per-label probability block."""
    return featurize_batch(schema, view, [x], groups, backoff)[0]


def featurize_batch(
    schema: FeatureSchema,
    view: CountView,
    rows: Sequence[Mapping[str, Any]],
    groups: Sequence[tuple[str, ...]] | None = None,
    backoff: BackoffConfig = BackoffConfig(),
) -> list[FeaturizedVector]:
    """Featurize many rows against one view; row ``i`` equals ``featurize(rows[i])``."""
    names = schema.feature_names
    for x in rows:
        missing = [n for n in names if n not in x]
        if missing:
            raise SchemaError(f"feature vector is missing {missing}")
    if groups is None:
        groups = schema.groups
    ids = schema.table_ids(groups)
    prior = view.prior()
    keys = [table_keys(schema, x, ids) for x in rows]
    counts: dict[str, np.ndarray | None] = {}
    for j, tid in enumerate(ids):
        t = view.tables.get(tid)
        counts[tid] = None if t is None else t.estimates_many([k[j] for k in keys])
    n = len(rows)
    blocks = {}
    for tid in ids:
        c = counts[tid]
        if c is None:
            blocks[tid] = (np.broadcast_to(prior, (n, prior.size)), np.ones(n, dtype=bool))
        else:
            blocks[tid] = conditional_probabilities_batch(c, prior, backoff)
    raw_names = schema.raw_passthrough()
    labels = schema.label_values
    out = []
    for i, x in enumerate(rows):
        entries: list[tuple[str, str, float]] = []
        flags: dict[str, bool] = {}
        for tid in ids:
            probs, backed = blocks[tid]
            flags[tid] = bool(backed[i])
            entries.extend((tid, lv, float(p)) for lv, p in zip(labels, probs[i]))
        out.append(FeaturizedVector(entries, flags, {n: x[n] for n in raw_names}))
    return out
