"""Desk-scale experiments on synthetic click data.

The generator plants additive user/item/context effects on the log-odds of
a click, so the Bayes-optimal loss is known exactly. Two model arms are
compared on the most recent slice of the training data:

* ``raw``: logistic regression on hashed one-hot features.
* ``count``: logistic regression on the log-odds of count-featurized
  probabilities, where counts come from all older training data.

Losses are normalized by the raw arm trained on the full training set.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from hotcount.lifecycle import Engine, EngineConfig, RetentionPolicy, SketchConfig, Weighting
from hotcount.privacy import PrivacyConfig, count_quantile_weights
from hotcount.sketch import SketchKind
from hotcount.tables import FeatureSchema, FeatureSpec, Observation, featurize_batch

RAW_HASH_BITS = 18
REPORT_COLUMNS = (
    "fraction", "arm", "epsilon", "k", "sketch_kind", "weighting",
    "logistic_loss", "squared_loss", "normalized_loss", "seed",
)
# reported full-scale reference values; documentation only
CRITEO_KAGGLE_BASELINE_LOGLOSS = 0.467


@dataclass
class ContextFeature:
    name: str
    cardinality: int
    scale: float


@dataclass
class SyntheticConfig:
    n_users: int = 2_000
    n_items: int = 400
    base_rate: float = 0.25
    user_scale: float = 0.8
    item_scale: float = 0.8
    context: list[ContextFeature] = field(default_factory=list)
    # XOR of two binary features shifts the log-odds by this much
    xor_strength: float = 0.0
    n_observations: int = 200_000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["context"] = [ContextFeature(**c) for c in d.get("context", [])]
        return cls(**d)


def rare_feature_config(seed: int = 0) -> SyntheticConfig:
    """One high-cardinality, low-count feature next to several common ones."""
    return SyntheticConfig(
        n_users=5_000,
        n_items=50,
        user_scale=1.0,
        item_scale=0.5,
        context=[
            ContextFeature("hour", 24, 0.3),
            ContextFeature("device", 4, 0.3),
            ContextFeature("site", 20, 0.4),
        ],
        n_observations=150_000,
        seed=seed,
    )


@dataclass
class Dataset:
    columns: dict[str, np.ndarray]
    labels: np.ndarray
    probs: np.ndarray
    n_train: int

    @property
    def feature_names(self) -> list[str]:
        return list(self.columns)

    def __len__(self) -> int:
        return self.labels.size

    def rows(self, sl: slice) -> list[dict[str, str]]:
        cols = {f: c[sl].astype(str) for f, c in self.columns.items()}
        n = self.labels[sl].size
        return [{f: cols[f][i] for f in cols} for i in range(n)]

    def train(self) -> slice:
        return slice(0, self.n_train)

    def test(self) -> slice:
        return slice(self.n_train, len(self))

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            [FeatureSpec(f) for f in self.columns], "click", ("0", "1"),
            include_raw_below_cardinality=0,
        )

    def bayes_logistic_loss(self, sl: slice | None = None) -> float:
        """Expected log loss of the true click probabilities."""
        p = self.probs if sl is None else self.probs[sl]
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -(p * np.log(p) + (1 - p) * np.log1p(-p))
        return float(np.nan_to_num(h).mean())


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Time-ordered observations; the first 80% train, the last 20% test."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_observations
    cols: dict[str, np.ndarray] = {}
    logits = np.full(n, _logit(min(max(cfg.base_rate, 1e-9), 1 - 1e-9)))
    specs = [("user", cfg.n_users, cfg.user_scale), ("item", cfg.n_items, cfg.item_scale)]
    specs += [(c.name, c.cardinality, c.scale) for c in cfg.context]
    for name, card, scale in specs:
        effects = rng.normal(0.0, scale, card) if scale > 0 else np.zeros(card)
        vals = rng.integers(0, card, n)
        cols[name] = vals
        logits += effects[vals]
    if cfg.xor_strength:
        a = rng.integers(0, 2, n)
        b = rng.integers(0, 2, n)
        cols["xa"], cols["xb"] = a, b
        logits += cfg.xor_strength * np.where(a ^ b, 1.0, -1.0)
    probs = np.clip(_sigmoid(logits), 1e-12, 1 - 1e-12)
    labels = (rng.random(n) < probs).astype(np.int64)
    return Dataset(cols, labels, probs, int(round(0.8 * n)))


# -- losses -----------------------------------------------------------------

def logistic_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


def squared_loss(y: np.ndarray, p: np.ndarray) -> float:
    return float(((y - p) ** 2).mean())


# -- linear model -----------------------------------------------------------

@dataclass
class SparseRows:
    """Fixed-width sparse rows: ``values[i, j]`` sits at column ``indices[i, j]``."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def dense(cls, x: np.ndarray) -> "SparseRows":
        x = np.asarray(x, dtype=np.float64)
        n, d = x.shape
        return cls(np.broadcast_to(np.arange(d), (n, d)).copy(), x, d)

    def concat(self, other: "SparseRows") -> "SparseRows":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return SparseRows(
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.values, other.values]),
            self.dim,
        )


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0

    def decision(self, rows: SparseRows) -> np.ndarray:
        return (self.weights[rows.indices] * rows.values).sum(axis=1) + self.bias

    def predict_proba(self, rows: SparseRows) -> np.ndarray:
        return _sigmoid(self.decision(rows))


def train_logistic(
    rows: SparseRows,
    labels: np.ndarray,
    learning_rate: float = 0.5,
    passes: int = 5,
    batch_size: int = 32,
    l2: float = 0.0,
    initial: LinearModel | None = None,
) -> LinearModel:
    """Minibatch SGD on the logistic loss with AdaGrad per-coordinate steps.

    Rows are visited in the given order, so the result is deterministic.
    """
    n = len(rows)
    if n == 0:
        raise ValueError("no training rows")
    y = np.asarray(labels, dtype=np.float64)
    model = initial or LinearModel(np.zeros(rows.dim))
    w = model.weights.astype(np.float64).copy()
    bias = float(model.bias)
    if learning_rate == 0:
        return LinearModel(w, bias)
    g2 = np.full(rows.dim, 1e-8)
    g2_bias = 1e-8
    for _ in range(passes):
        for start in range(0, n, batch_size):
            idx = rows.indices[start:start + batch_size]
            val = rows.values[start:start + batch_size]
            z = (w[idx] * val).sum(axis=1) + bias
            err = _sigmoid(z) - y[start:start + batch_size]
            touched, inv = np.unique(idx, return_inverse=True)
            grad = np.bincount(inv.ravel(), weights=(err[:, None] * val).ravel(), minlength=touched.size)
            grad += l2 * w[touched]
            g2[touched] += grad ** 2
            w[touched] -= learning_rate * grad / np.sqrt(g2[touched])
            gb = float(err.sum())
            g2_bias += gb * gb
            bias -= learning_rate * gb / math.sqrt(g2_bias)
    return LinearModel(w, bias)


# -- encodings --------------------------------------------------------------

def hashed_onehot(ds: Dataset, sl: slice, bits: int = RAW_HASH_BITS) -> SparseRows:
    """Hash every (feature, value) pair into ``2**bits`` buckets."""
    mask = (1 << bits) - 1
    cols = []
    for j, f in enumerate(ds.feature_names):
        v = ds.columns[f][sl].astype(np.uint64)
        salt = np.uint64(((j + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
        h = (v + salt) * np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(29)
        cols.append((h & np.uint64(mask)).astype(np.int64))
    idx = np.stack(cols, axis=1)
    return SparseRows(idx, np.ones(idx.shape), 1 << bits)


def count_features(vectors, schema: FeatureSchema, positive: str = "1") -> SparseRows:
    """Log-odds of each block's positive-label probability."""
    li = schema.label_values.index(positive)
    n_labels = schema.n_labels
    probs = np.array([v.probabilities()[li::n_labels] for v in vectors])
    x = _logit(np.clip(probs, 1e-4, 1 - 1e-4))
    return SparseRows.dense(x)


# -- experiments ------------------------------------------------------------

@dataclass
class NoiseSetting:
    epsilon: float
    k: int = 1
    weighting: str = "weighted"
    sketch_kind: str = "count_median"
    weight_quantile: float = 0.01


@dataclass
class HarnessConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    fractions: tuple[float, ...] = (0.01, 0.05, 0.2, 1.0)
    noise: list[NoiseSetting] = field(default_factory=list)
    sketch_width: int = 1 << 14
    sketch_depth: int = 5
    learning_rate: float = 0.5
    raw_passes: int = 3
    count_passes: int = 3
    # backoff thresholds for the count arm (counts per value are small here)
    n_min: float = 20.0

    @classmethod
    def from_dict(cls, d: dict) -> "HarnessConfig":
        d = dict(d)
        if "synthetic" in d:
            d["synthetic"] = SyntheticConfig.from_dict(d["synthetic"])
        if "noise" in d:
            d["noise"] = [NoiseSetting(**n) for n in d["noise"]]
        if "fractions" in d:
            d["fractions"] = tuple(d["fractions"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "HarnessConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _recent(ds: Dataset, fraction: float) -> slice:
    n = max(1, int(round(fraction * ds.n_train)))
    return slice(ds.n_train - n, ds.n_train)


def _count_engine(ds: Dataset, hc: HarnessConfig, upto: int, noise: NoiseSetting | None,
                  hot: slice, seed: int) -> Engine:
    schema = ds.schema()
    kind = SketchKind(noise.sketch_kind) if noise else SketchKind.COUNT_MIN
    privacy = PrivacyConfig(noise.epsilon, noise.k, hc.sketch_depth) if noise else None
    weights = None
    if noise is not None and noise.weighting == "weighted":
        counts = {}
        for f in ds.feature_names:
            _, c = np.unique(ds.columns[f][hot], return_counts=True)
            counts[f] = c.tolist()
        weights = count_quantile_weights(counts, noise.weight_quantile)
    cfg = EngineConfig(
        sketch=SketchConfig(kind, hc.sketch_depth, hc.sketch_width, seed),
        privacy=privacy,
        weighting=Weighting.WEIGHTED if weights else Weighting.EVEN,
        backoff=replace(EngineConfig().backoff, n_min=hc.n_min),
    )
    engine = Engine(schema, RetentionPolicy(hot_capacity=1, retention=1), cfg, seed=seed,
                    noise_weights=weights)
    if upto > 0:
        engine.observe_many(
            Observation(r, str(y)) for r, y in zip(ds.rows(slice(0, upto)), ds.labels[:upto])
        )
    engine.roll_window()
    return engine


def _evaluate(model: LinearModel, rows: SparseRows, y: np.ndarray) -> tuple[float, float]:
    p = model.predict_proba(rows)
    return logistic_loss(y, p), squared_loss(y, p)


def run_convergence_experiment(
    hc: HarnessConfig,
    fractions: Sequence[float] | None = None,
    noise: Sequence[NoiseSetting | None] | None = None,
    include_raw: bool = True,
) -> list[dict[str, Any]]:
    """Normalized losses per training fraction for the raw and count arms."""
    ds = generate_synthetic(hc.synthetic)
    seed = hc.synthetic.seed
    fractions = tuple(hc.fractions if fractions is None else fractions)
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    settings: list[NoiseSetting | None] = [None] + list(hc.noise) if noise is None else list(noise)
    test = ds.test()
    y_test = ds.labels[test]

    raw_test = hashed_onehot(ds, test)
    base_model = train_logistic(hashed_onehot(ds, ds.train()), ds.labels[ds.train()],
                                hc.learning_rate, hc.raw_passes)
    base_ll, _ = _evaluate(base_model, raw_test, y_test)

    def row(frac, arm, ll, sq, ns: NoiseSetting | None):
        return {
            "fraction": frac,
            "arm": arm,
            "epsilon": ns.epsilon if ns else "",
            "k": ns.k if ns else "",
            "sketch_kind": ns.sketch_kind if ns else "",
            "weighting": ns.weighting if ns else "",
            "logistic_loss": ll,
            "squared_loss": sq,
            "normalized_loss": ll / base_ll,
            "seed": seed,
        }

    report = []
    for frac in fractions:
        recent = _recent(ds, frac)
        y_tr = ds.labels[recent]
        if include_raw:
            if frac == 1.0:
                model = base_model
            else:
                model = train_logistic(hashed_onehot(ds, recent), y_tr, hc.learning_rate, hc.raw_passes)
            report.append(row(frac, "raw", *_evaluate(model, raw_test, y_test), None))
        train_rows = ds.rows(recent)
        test_rows = ds.rows(test)
        for ns in settings:
            engine = _count_engine(ds, hc, recent.start, ns, recent, seed)
            schema = engine.schema
            view = engine.aggregate_view()
            x_tr = count_features(featurize_batch(schema, view, train_rows, backoff=engine.config.backoff), schema)
            x_te = count_features(featurize_batch(schema, view, test_rows, backoff=engine.config.backoff), schema)
            model = train_logistic(x_tr, y_tr, hc.learning_rate, hc.count_passes)
            report.append(row(frac, "count", *_evaluate(model, x_te, y_test), ns))
    return report


def write_report(rows: Iterable[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
