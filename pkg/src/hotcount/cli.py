"""Command-line interface.

Engine state lives in a state directory (``--state``, default ``.hotcount``)
as a full-state snapshot that every command loads and, if it changed
anything, writes back atomically.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterator

from hotcount.errors import HotcountError, StateError
from hotcount.lifecycle import (
    Engine,
    EngineConfig,
    RetentionMode,
    RetentionPolicy,
    SketchConfig,
    Weighting,
)
from hotcount.privacy import PrivacyConfig
from hotcount.selection import select_groups
from hotcount.service.snapshot import (
    load_snapshot_file,
    restore_engine,
    save_snapshot_file,
    serialize_snapshot,
)
from hotcount.sketch import SketchKind
from hotcount.tables import BackoffConfig, FeatureSchema, Observation

STATE_FILE = "engine.pyrc"
SEED_ENV = "PYRAMID_SEED"


def env_seed() -> int | None:
    v = os.environ.get(SEED_ENV)
    return int(v) if v not in (None, "") else None


def engine_from_config(schema: FeatureSchema, cfg: dict[str, Any], seed: int | None = None) -> Engine:
    """Build an engine from a JSON-style config document."""
    pol = dict(cfg.get("policy", {}))
    if "mode" in pol:
        pol["mode"] = RetentionMode(pol["mode"])
    sk = dict(cfg.get("sketch", {}))
    if "kind" in sk:
        sk["kind"] = SketchKind(sk["kind"])
    sketch = SketchConfig(**sk)
    priv = cfg.get("privacy")
    privacy = PrivacyConfig(**{"depth": sketch.depth, **priv}) if priv else None
    extra = {k: cfg[k] for k in (
        "weight_quantile", "prior_fraction", "group_fraction", "weights_fraction", "reserve_fraction",
    ) if k in cfg}
    config = EngineConfig(
        sketch=sketch,
        privacy=privacy,
        backoff=BackoffConfig(**cfg.get("backoff", {})),
        weighting=Weighting(cfg.get("weighting", "even")),
        **extra,
    )
    return Engine(schema, RetentionPolicy(**pol), config, seed=seed)


def read_rows(path: str, fmt: str | None = None) -> Iterator[dict[str, Any]]:
    fmt = fmt or ("jsonl" if path.endswith((".jsonl", ".json")) else "csv")
    stream = sys.stdin if path == "-" else open(path, newline="")
    with stream:
        if fmt == "csv":
            yield from csv.DictReader(stream)
        elif fmt == "jsonl":
            for line in stream:
                if line.strip():
                    yield json.loads(line)
        else:
            raise ValueError(f"unknown input format {fmt!r}")


def row_to_observation(schema: FeatureSchema, row: dict[str, Any]) -> Observation:
    if schema.label not in row:
        raise StateError(f"input row lacks the label column {schema.label!r}")
    values = {f: row[f] for f in schema.feature_names if f in row}
    p = float(row["p"]) if row.get("p") not in (None, "") else 1.0
    ts = float(row["timestamp"]) if row.get("timestamp") not in (None, "") else 0.0
    return Observation(values, row[schema.label], p, ts)


class State:
    def __init__(self, directory: str):
        self.dir = Path(directory)
        self.path = self.dir / STATE_FILE

    def exists(self) -> bool:
        return self.path.exists()

    def load(self) -> Engine:
        if not self.exists():
            raise StateError(f"no engine state in {self.dir}; run `ingest --schema ...` first")
        return restore_engine(self.path.read_bytes())

    def save(self, engine: Engine) -> None:
        save_snapshot_file(self.path, serialize_snapshot(engine, full_state=True))


def _print(obj: Any) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_ingest(args) -> int:
    state = State(args.state)
    rows = list(read_rows(args.input, args.format))
    if state.exists():
        engine = state.load()
    else:
        if not args.schema:
            raise StateError("the first ingest needs --schema")
        schema = FeatureSchema.load(args.schema)
        schema.fit_bins(rows)
        cfg = json.loads(Path(args.config).read_text()) if args.config else {}
        engine = engine_from_config(schema, cfg, env_seed())
    events = engine.observe_many(row_to_observation(engine.schema, r) for r in rows)
    state.save(engine)
    _print({"ingested": len(rows), "populating_window": engine.current.window_id,
            "events": [e.to_dict() for e in events]})
    return 0


def cmd_featurize(args) -> int:
    view = load_snapshot_file(args.snapshot)
    rows = list(read_rows(args.input, args.format))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for vec in view.featurize_many(rows):
            out.write(json.dumps(vec.to_dict()) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_trainset(args) -> int:
    engine = State(args.state).load()
    with open(args.out, "w") as f:
        for vec, label, p in engine.get_train_set():
            f.write(json.dumps({"features": vec.to_dict(), "label": label, "p": p}) + "\n")
    return 0


def cmd_rollover(args) -> int:
    state = State(args.state)
    engine = state.load()
    ev = engine.roll_window()
    state.save(engine)
    _print({"event": ev.to_dict() if ev else None, "populating_window": engine.current.window_id})
    return 0


def cmd_weights(args) -> int:
    state = State(args.state)
    engine = state.load()
    weights = engine.compute_noise_weights(args.private, args.quantile, args.epsilon, apply=args.apply)
    if args.private or args.apply:
        state.save(engine)
    _print({"weights": weights, "private": args.private, "applied": args.apply})
    return 0


def cmd_select_groups(args) -> int:
    state = State(args.state)
    engine = state.load()
    cands = select_groups(list(engine.hot), engine.schema, args.max_groups, args.max_size)
    if args.apply and cands:
        engine.add_groups(c.members for c in cands)
        state.save(engine)
    _print([{"members": list(c.members), "mi": c.mi_score, "status": c.status.value} for c in cands])
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from hotcount.service.http import create_app

    engine = State(args.state).load()
    host, _, port = args.listen.rpartition(":")
    app = create_app(engine, snapshot_dir=args.snapshot_dir)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def cmd_snapshot(args) -> int:
    state = State(args.state)
    if args.action == "save":
        engine = state.load()
        save_snapshot_file(args.file, serialize_snapshot(engine, full_state=not args.view_only))
        _print({"saved": args.file, "full_state": not args.view_only})
    else:
        data = Path(args.file).read_bytes()
        engine = restore_engine(data)
        state.save(engine)
        _print({"loaded": args.file, "populating_window": engine.current.window_id})
    return 0


def cmd_bench(args) -> int:
    if args.what == "convergence":
        from hotcount.evalharness import HarnessConfig, run_convergence_experiment, write_report

        hc = HarnessConfig.load(args.config) if args.config else HarnessConfig()
        seed = env_seed()
        if seed is not None:
            hc.synthetic.seed = seed
        rows = run_convergence_experiment(hc)
        write_report(rows, args.out)
        for r in rows:
            print(f"{r['fraction']:>6} {r['arm']:>5} eps={r['epsilon']!s:>4} "
                  f"{r['sketch_kind']:>12} {r['weighting']:>8} norm={r['normalized_loss']:.4f}")
    else:
        from hotcount.bench import run_kernel_benchmark

        run_kernel_benchmark(args.keys, args.width)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hotcount", description=__doc__.splitlines()[0])
    p.add_argument("--state", default=os.environ.get("HOTCOUNT_STATE", ".hotcount"),
                   help="engine state directory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="append observations from a file")
    s.add_argument("--schema")
    s.add_argument("--config", help="engine config JSON (first ingest only)")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("csv", "jsonl"))
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("featurize", help="featurize rows against a snapshot")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("csv", "jsonl"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("trainset", help="write the featurized hot window")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trainset)

    s = sub.add_parser("rollover", help="seal the populating window")
    s.set_defaults(func=cmd_rollover)

    s = sub.add_parser("weights", help="noise weights from hot-window counts")
    s.add_argument("--quantile", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--private", action="store_true")
    s.add_argument("--apply", action="store_true", help="use for windows opened later")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("select-groups", help="MI-based feature group selection")
    s.add_argument("--max-groups", type=int, default=35)
    s.add_argument("--max-size", type=int, default=3)
    s.add_argument("--apply", action="store_true", help="count selected groups on a trial basis")
    s.set_defaults(func=cmd_select_groups)

    s = sub.add_parser("serve", help="run the HTTP API")
    s.add_argument("--listen", default="127.0.0.1:8080")
    s.add_argument("--snapshot-dir")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("snapshot", help="save or load engine snapshots")
    s.add_argument("action", choices=("save", "load"))
    s.add_argument("file")
    s.add_argument("--view-only", action="store_true", help="sealed windows only (for replication)")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("bench", help="experiments and benchmarks")
    s.add_argument("what", choices=("convergence", "kernels"))
    s.add_argument("--config")
    s.add_argument("--out", default="report.csv")
    s.add_argument("--keys", type=int, default=200_000)
    s.add_argument("--width", type=int, default=1 << 16)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HotcountError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
