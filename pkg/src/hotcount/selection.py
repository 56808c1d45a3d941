"""Mutual-information selection of feature groups worth counting.

A pair of features earns its own count table when the pair tells more
about the label than either member alone. Surviving pairs are grown
greedily one feature at a time. Selected groups are counted on a trial
basis and re-scored later from their (noisy) count tables.
"""

from __future__ import annotations

import collections
import enum
import itertools
import math
from dataclasses import dataclass, replace
from typing import Any, Hashable, Mapping, Sequence

import numpy as np

from hotcount.errors import StateError
from hotcount.tables import CountView, FeatureSchema, Observation, group_id, table_keys

DEFAULT_MARGIN = 0.001
DEFAULT_MAX_GROUPS = 35
DEFAULT_MAX_GROUP_SIZE = 3
VALUE_CAP = 1024
OTHER = "\x00other"


class GroupStatus(enum.Enum):
    TRIAL = "trial"
    CONFIRMED = "confirmed"
    DROPPED = "dropped"


@dataclass(frozen=True)
class GroupCandidate:
    members: tuple[str, ...]
    mi_score: float
    status: GroupStatus = GroupStatus.TRIAL

    @property
    def table_id(self) -> str:
        return group_id(self.members)


def empirical_mi(joint_counts: Mapping[tuple[Hashable, Hashable], float]) -> float:
    """Plug-in mutual information (nats) between value and label.

    Keys are ``(value, label)`` pairs; negative counts are treated as zero.
    """
    total = 0.0
    px: dict[Hashable, float] = collections.defaultdict(float)
    pl: dict[Hashable, float] = collections.defaultdict(float)
    cells = []
    for (x, l), c in joint_counts.items():
        c = max(float(c), 0.0)
        if c > 0:
            cells.append((x, l, c))
            px[x] += c
            pl[l] += c
            total += c
    if total <= 0:
        raise ValueError("joint counts are empty")
    mi = math.fsum(c / total * math.log(c * total / (px[x] * pl[l])) for x, l, c in cells)
    return max(mi, 0.0)


def _mi_from_codes(codes: np.ndarray, labels: np.ndarray, n_labels: int) -> float:
    """MI between integer-coded values and labels via a dense contingency table."""
    n_vals = int(codes.max()) + 1
    table = np.bincount(codes * n_labels + labels, minlength=n_vals * n_labels).reshape(n_vals, n_labels)
    total = table.sum()
    px = table.sum(axis=1, keepdims=True)
    pl = table.sum(axis=0, keepdims=True)
    nz = table > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = table * np.log(table * total / (px * pl))
    return max(float(terms[nz].sum() / total), 0.0)


class _Encoder:
    """Integer codes per feature, high-cardinality tails folded into one value."""

    def __init__(self, schema: FeatureSchema, rows: Sequence[Observation], cap: int = VALUE_CAP):
        self.n = len(rows)
        self.codes: dict[str, np.ndarray] = {}
        for f in schema.feature_names:
            vals = [schema.discretize(f, o.values[f]) for o in rows]
            freq = collections.Counter(vals)
            if len(freq) > cap:
                keep = sorted(freq, key=lambda v: (-freq[v], v))[:cap]
            else:
                keep = sorted(freq)
            index = {v: i for i, v in enumerate(keep)}
            other = len(keep)
            self.codes[f] = np.array([index.get(v, other) for v in vals], dtype=np.int64)
        self.labels = np.array([schema.label_index(o.label) for o in rows], dtype=np.int64)
        self.n_labels = schema.n_labels
        self._cache: dict[tuple[str, ...], float] = {}

    def joint_codes(self, members: Sequence[str]) -> np.ndarray:
        combined = np.zeros(self.n, dtype=np.int64)
        for f in members:
            c = self.codes[f]
            combined = combined * (int(c.max()) + 1) + c
            # re-densify to keep the product from overflowing
            _, combined = np.unique(combined, return_inverse=True)
        return combined

    def mi(self, members: Sequence[str]) -> float:
        key = tuple(sorted(members))
        if key not in self._cache:
            self._cache[key] = _mi_from_codes(self.joint_codes(key), self.labels, self.n_labels)
        return self._cache[key]


def select_groups(
    hot_window: Sequence[Observation],
    schema: FeatureSchema,
    max_groups: int = DEFAULT_MAX_GROUPS,
    max_group_size: int = DEFAULT_MAX_GROUP_SIZE,
    margin: float = DEFAULT_MARGIN,
) -> list[GroupCandidate]:
    """Groups whose joint MI with the label beats their members' MI.

    Pairs qualify when ``MI(a, b; L) > max(MI(a; L), MI(b; L)) + margin``.
    Each qualifying pair is then extended greedily with the feature that
    raises its MI the most, while the gain exceeds ``margin`` and the group
    stays within ``max_group_size``. Results are ordered by MI, ties broken
    by member names.
    """
    if not hot_window:
        raise StateError("hot window is empty")
    if max_group_size < 2:
        raise ValueError("max_group_size must be >= 2")
    if max_groups <= 0:
        return []
    enc = _Encoder(schema, hot_window)
    names = sorted(schema.feature_names)
    found: dict[tuple[str, ...], float] = {}
    for a, b in itertools.combinations(names, 2):
        pair_mi = enc.mi((a, b))
        if pair_mi <= max(enc.mi((a,)), enc.mi((b,))) + margin:
            continue
        group, score = (a, b), pair_mi
        while len(group) < max_group_size:
            best = None
            for f in names:
                if f in group:
                    continue
                cand = tuple(sorted(group + (f,)))
                m = enc.mi(cand)
                if m > score + margin and (best is None or m > best[1]):
                    best = (cand, m)
            if best is None:
                break
            group, score = best
        found[group] = score
    ranked = sorted(found.items(), key=lambda kv: (-kv[1], kv[0]))
    return [GroupCandidate(g, s) for g, s in ranked[:max_groups]]


def table_joint_counts(
    schema: FeatureSchema,
    view: CountView,
    table_id: str,
    domain: Sequence[Mapping[str, Any]],
) -> dict[tuple[bytes, str], float] | None:
    """Joint (key, label) counts read from a count table for the keys in ``domain``."""
    table = view.tables.get(table_id)
    if table is None:
        return None
    keys = sorted({table_keys(schema, x, [table_id])[0] for x in domain})
    if not keys:
        return {}
    est = np.maximum(table.estimates_many(keys), 0.0)
    return {
        (k, lv): float(est[i, j])
        for i, k in enumerate(keys)
        for j, lv in enumerate(schema.label_values)
    }


def _table_mi(schema, view, table_id, domain) -> float:
    joint = table_joint_counts(schema, view, table_id, domain)
    if joint is None:
        raise StateError(f"no count table for {table_id!r}")
    try:
        return empirical_mi(joint)
    except ValueError:
        return 0.0


def reevaluate_groups(
    candidates: Sequence[GroupCandidate],
    view: CountView,
    schema: FeatureSchema,
    domain: Sequence[Mapping[str, Any]],
    margin: float = DEFAULT_MARGIN,
) -> list[GroupCandidate]:
    """Re-score trial groups from sealed count tables.

    ``domain`` supplies the feature values whose counts are read (normally
    the hot window). A group is confirmed when its table's MI beats every
    member's single-feature table MI by ``margin``; otherwise it is dropped.
    """
    out = []
    for cand in candidates:
        if cand.table_id not in view.tables:
            raise StateError(f"no trial table for group {cand.members}")
        score = _table_mi(schema, view, cand.table_id, domain)
        singles = max(_table_mi(schema, view, m, domain) for m in cand.members)
        status = GroupStatus.CONFIRMED if score > singles + margin else GroupStatus.DROPPED
        out.append(replace(cand, mi_score=score, status=status))
    return out
