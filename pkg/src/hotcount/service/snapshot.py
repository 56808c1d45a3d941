"""Binary snapshot container.

Layout, all integers little-endian::

    b"PYRC"                      magic
    u32                          format version
    u64 + bytes                  metadata document (UTF-8 JSON, sorted keys)
    per sketch block:
        u32 + bytes              block id
        u32 h, u32 w             dimensions
        h x u64                  row seeds
        h x u64                  sign seeds (zeros for count-min)
        h*w x f64                cells, row-major
    32 bytes                     SHA-256 of everything before it

The metadata lists the blocks in order together with their sketch kind,
hash seed and noise scale, plus schema, window states, label totals and
the budget ledger. A snapshot either contains only sealed windows (what
application servers replicate) or the full engine state, including the
populating window, the hot window and the RNG state.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from hotcount.errors import BadMagicError, ChecksumError, SnapshotFormatError, VersionError
from hotcount.lifecycle import (
    Engine,
    EngineConfig,
    RetentionMode,
    RetentionPolicy,
    SketchConfig,
    Weighting,
    Window,
    WindowStatus,
)
from hotcount.privacy import BudgetLedger, NoisePlan, PrivacyConfig
from hotcount.sketch import Sketch, SketchKind
from hotcount.tables import (
    BackoffConfig,
    CountTable,
    CountView,
    FeatureSchema,
    FeaturizedVector,
    Observation,
    featurize_batch,
    merge_tables,
)

MAGIC = b"PYRC"
FORMAT_VERSION = 1
_DIGEST = 32


# -- encoding ---------------------------------------------------------------

def _window_meta(w: Window, blocks: list) -> dict:
    for tid, table in w.tables.items():
        for li, sk in enumerate(table.per_label):
            blocks.append((f"{w.level}/{w.window_id}/{tid}/{li}", sk))
    return {
        "id": w.window_id,
        "level": w.level,
        "status": w.status.value,
        "start_ts": w.start_ts,
        "end_ts": w.end_ts,
        "n_obs": w.n_obs,
        "label_totals": [float(v) for v in w.label_totals],
        "plan": w.plan.to_dict() if w.plan is not None else None,
        "tables": list(w.tables),
    }


def _config_meta(engine: Engine) -> dict:
    c = engine.config
    return {
        "sketch": {"kind": c.sketch.kind.value, "depth": c.sketch.depth,
                   "width": c.sketch.width, "seed": c.sketch.seed},
        "privacy": asdict(c.privacy) if c.privacy is not None else None,
        "backoff": asdict(c.backoff),
        "weighting": c.weighting.value,
        "weight_quantile": c.weight_quantile,
        "prior_fraction": c.prior_fraction,
        "group_fraction": c.group_fraction,
        "weights_fraction": c.weights_fraction,
        "reserve_fraction": c.reserve_fraction,
    }


def _policy_meta(p: RetentionPolicy) -> dict:
    d = asdict(p)
    d["mode"] = p.mode.value
    return d


def serialize_snapshot(engine: Engine, full_state: bool = False) -> bytes:
    """Encode the engine's sealed windows, or its entire state with ``full_state``.

    Output is deterministic: the same engine state always yields the same bytes.
    """
    with engine._lock:
        blocks: list[tuple[str, Sketch]] = []
        windows = [_window_meta(w, blocks) for w in engine.sealed_windows()]
        nodes = [
            _window_meta(engine.nodes[k], blocks)
            for k in sorted(engine.nodes)
            if full_state or engine.nodes[k].status is WindowStatus.SEALED
        ]
        meta: dict[str, Any] = {
            "format": "hotcount-snapshot",
            "full_state": full_state,
            "schema": engine.schema.to_dict(),
            "groups": [list(g) for g in engine.groups],
            "policy": _policy_meta(engine.policy),
            "config": _config_meta(engine),
            "engine_version": engine.version,
            "windows": windows,
            "nodes": nodes,
            "expired_ids": list(engine.expired_ids),
            "ledger": engine.ledger.to_dict(),
            "noise_weights": dict(sorted(engine.noise_weights.items())),
        }
        if full_state:
            meta["current"] = _window_meta(engine.current, blocks)
            meta["pending_groups"] = (
                [list(g) for g in engine._pending_groups] if engine._pending_groups is not None else None
            )
            meta["hot"] = [o.to_dict() for o in engine.hot]
            meta["rng_state"] = engine.rng.bit_generator.state
            meta["calibration"] = (
                {f: dict(c) for f, c in engine._calibration.items()}
                if engine._calibration is not None else None
            )
        meta["blocks"] = [
            {"id": bid, "kind": sk.kind.value, "seed": sk.seed, "noise_scale": sk.noise_scale}
            for bid, sk in blocks
        ]
        doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        buf.write(struct.pack("<Q", len(doc)))
        buf.write(doc)
        for bid, sk in blocks:
            raw_id = bid.encode("utf-8")
            buf.write(struct.pack("<I", len(raw_id)))
            buf.write(raw_id)
            buf.write(struct.pack("<II", sk.depth, sk.width))
            buf.write(sk.row_seeds.astype("<u8").tobytes())
            buf.write(sk.sign_seeds.astype("<u8").tobytes())
            buf.write(np.ascontiguousarray(sk.cells, dtype="<f8").tobytes())
        body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


# -- decoding ---------------------------------------------------------------

def _verify(data: bytes) -> memoryview:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError("not a snapshot: bad magic bytes")
    if len(data) < 8 + 8 + _DIGEST:
        raise ChecksumError("snapshot truncated")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported snapshot version {version} (expected {FORMAT_VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("snapshot checksum mismatch")
    return memoryview(body)


@dataclass
class _Decoded:
    meta: dict
    sketches: dict[str, Sketch]


def _decode(data: bytes) -> _Decoded:
    body = _verify(bytes(data))
    try:
        off = 8
        (doc_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        meta = json.loads(bytes(body[off:off + doc_len]).decode("utf-8"))
        off += doc_len
        sketches = {}
        for b in meta["blocks"]:
            (id_len,) = struct.unpack_from("<I", body, off)
            off += 4
            bid = bytes(body[off:off + id_len]).decode("utf-8")
            off += id_len
            if bid != b["id"]:
                raise SnapshotFormatError(f"block order mismatch at {bid!r}")
            h, w = struct.unpack_from("<II", body, off)
            off += 8
            rows = np.frombuffer(body, dtype="<u8", count=h, offset=off).astype(np.uint64)
            off += 8 * h
            signs = np.frombuffer(body, dtype="<u8", count=h, offset=off).astype(np.uint64)
            off += 8 * h
            cells = np.frombuffer(body, dtype="<f8", count=h * w, offset=off).astype(np.float64)
            off += 8 * h * w
            sketches[bid] = Sketch(
                SketchKind(b["kind"]), h, w, b["seed"], b["noise_scale"],
                cells.reshape(h, w), rows, signs,
            )
        if off != len(body):
            raise SnapshotFormatError("trailing bytes after the last block")
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, SnapshotFormatError):
            raise
        raise SnapshotFormatError(f"malformed snapshot: {exc}") from exc
    return _Decoded(meta, sketches)


def _window_from_meta(m: dict, sketches: Mapping[str, Sketch], n_labels: int) -> Window:
    tables = {}
    for tid in m["tables"]:
        per_label = [sketches[f"{m['level']}/{m['id']}/{tid}/{li}"] for li in range(n_labels)]
        tables[tid] = CountTable(tid, per_label)
    w = Window(
        window_id=m["id"],
        status=WindowStatus(m["status"]),
        tables=tables,
        label_totals=np.array(m["label_totals"], dtype=np.float64),
        level=m["level"],
        start_ts=m["start_ts"],
        end_ts=m["end_ts"],
        n_obs=m["n_obs"],
        plan=NoisePlan.from_dict(m["plan"]) if m["plan"] is not None else None,
    )
    if w.status is not WindowStatus.POPULATING:
        w.freeze()
    return w


def _config_from_meta(d: dict) -> EngineConfig:
    return EngineConfig(
        sketch=SketchConfig(SketchKind(d["sketch"]["kind"]), d["sketch"]["depth"],
                            d["sketch"]["width"], d["sketch"]["seed"]),
        privacy=PrivacyConfig(**d["privacy"]) if d["privacy"] is not None else None,
        backoff=BackoffConfig(**d["backoff"]),
        weighting=Weighting(d["weighting"]),
        weight_quantile=d["weight_quantile"],
        prior_fraction=d["prior_fraction"],
        group_fraction=d["group_fraction"],
        weights_fraction=d["weights_fraction"],
        reserve_fraction=d.get("reserve_fraction", 0.0),
    )


class SnapshotView:
    """Read-only featurization view decoded from a snapshot."""

    def __init__(self, meta: dict, sketches: Mapping[str, Sketch]):
        self.meta = meta
        self.schema = FeatureSchema.from_dict(meta["schema"])
        self.groups = [tuple(g) for g in meta["groups"]]
        self.backoff = BackoffConfig(**meta["config"]["backoff"])
        self.ledger = BudgetLedger.from_dict(meta["ledger"])
        self.engine_version = meta["engine_version"]
        n_labels = self.schema.n_labels
        self.windows = [_window_from_meta(m, sketches, n_labels) for m in meta["windows"]]
        self.nodes = {(m["level"], m["id"]): _window_from_meta(m, sketches, n_labels) for m in meta["nodes"]}
        self.view = self._build_view()

    def _build_view(self) -> CountView:
        from hotcount.lifecycle import dyadic_cover

        n_labels = self.schema.n_labels
        if not self.windows:
            return CountView.empty(n_labels, self.engine_version)
        policy = self.meta["policy"]
        if policy["mode"] == RetentionMode.DYADIC_TREE.value:
            by_id = {w.window_id: w for w in self.windows}
            levels = RetentionPolicy(**{**policy, "mode": RetentionMode.DYADIC_TREE}).tree_levels
            cover = dyadic_cover(self.windows[0].window_id, self.windows[-1].window_id, levels - 1)
            sources = [by_id[m] if j == 0 else self.nodes[(j, m)] for j, m in cover]
        else:
            sources = self.windows
        tables = {}
        for s in sources:
            for tid in s.tables:
                if tid not in tables:
                    parts = [x.tables[tid] for x in sources if tid in x.tables]
                    tables[tid] = merge_tables(parts).freeze()
        totals = np.zeros(n_labels)
        for s in sources:
            totals = totals + s.label_totals
        ids = tuple(sorted({w for s in sources for w in range(s.first, s.last + 1)}))
        return CountView(tables, totals, ids, self.engine_version)

    def featurize(self, x: Mapping[str, Any]) -> FeaturizedVector:
        return self.featurize_many([x])[0]

    def featurize_many(self, rows: Sequence[Mapping[str, Any]]) -> list[FeaturizedVector]:
        return featurize_batch(self.schema, self.view, rows, self.groups, self.backoff)

    def grid_digest(self) -> str:
        h = hashlib.sha256()
        for w in self.windows + [self.nodes[k] for k in sorted(self.nodes)]:
            for tid in w.tables:
                for sk in w.tables[tid].per_label:
                    h.update(np.ascontiguousarray(sk.cells).tobytes())
        return h.hexdigest()


def deserialize_snapshot(data: bytes) -> SnapshotView:
    """Decode and validate a snapshot; nothing is returned unless it is intact."""
    d = _decode(data)
    return SnapshotView(d.meta, d.sketches)


def restore_engine(data: bytes) -> Engine:
    """Rebuild a live engine from a full-state snapshot."""
    d = _decode(data)
    meta = d.meta
    if not meta.get("full_state"):
        raise SnapshotFormatError("snapshot does not carry the full engine state")
    schema = FeatureSchema.from_dict(meta["schema"])
    policy = RetentionPolicy(**{**meta["policy"], "mode": RetentionMode(meta["policy"]["mode"])})
    engine = Engine.__new__(Engine)
    Engine._init_empty(engine, schema, policy, _config_from_meta(meta["config"]))
    n_labels = schema.n_labels
    engine.groups = [tuple(g) for g in meta["groups"]]
    pending = meta.get("pending_groups")
    engine._pending_groups = [tuple(g) for g in pending] if pending is not None else None
    engine.noise_weights = dict(meta["noise_weights"])
    engine.ledger = BudgetLedger.from_dict(meta["ledger"])
    engine.version = meta["engine_version"]
    engine.expired_ids = list(meta["expired_ids"])
    for m in meta["windows"]:
        w = _window_from_meta(m, d.sketches, n_labels)
        engine.windows[w.window_id] = w
    for m in meta["nodes"]:
        w = _window_from_meta(m, d.sketches, n_labels)
        engine.nodes[(w.level, w.window_id)] = w
    engine.current = _window_from_meta(meta["current"], d.sketches, n_labels)
    engine.hot.extend(Observation.from_dict(o) for o in meta["hot"])
    engine.rng.bit_generator.state = meta["rng_state"]
    cal = meta.get("calibration")
    if cal is not None:
        import collections

        engine._calibration = {f: collections.Counter(c) for f, c in cal.items()}
    return engine


# -- files ------------------------------------------------------------------

def save_snapshot_file(path: str | Path, data: bytes) -> None:
    """Write ``data`` atomically: readers see the old file or the new one, never a mix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_snapshot_file(path: str | Path) -> SnapshotView:
    return deserialize_snapshot(Path(path).read_bytes())


def version_token(data: bytes) -> str:
    """Opaque token identifying a snapshot's content (its checksum prefix)."""
    return data[-_DIGEST:].hex()[:16]
