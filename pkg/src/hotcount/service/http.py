"""HTTP API over a single engine."""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any

from fastapi import BackgroundTasks, FastAPI, HTTPException, Request, Response
from fastapi.responses import StreamingResponse

from hotcount.errors import HotcountError, SchemaError
from hotcount.lifecycle import Engine, RetrainEvent
from hotcount.service.snapshot import save_snapshot_file, serialize_snapshot, version_token
from hotcount.service.webhooks import WebhookRegistration, notify_retrain
from hotcount.tables import Observation

SNAPSHOT_NAME = "snapshot.pyrc"


class SnapshotCache:
    """Serialized sealed view, rebuilt only when the engine version changes."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self._lock = threading.Lock()
        self._version: int | None = None
        self._data = b""
        self._token = ""

    def get(self) -> tuple[bytes, str]:
        with self._lock:
            if self._version != self.engine.version:
                self._data = serialize_snapshot(self.engine)
                self._token = version_token(self._data)
                self._version = self.engine.version
            return self._data, self._token


def _parse_observations(body: Any) -> list[Observation]:
    items = body.get("observations", [body]) if isinstance(body, dict) else body
    if not isinstance(items, list):
        raise SchemaError("expected an observation or a list of observations")
    return [Observation.from_dict(o) for o in items]


def create_app(
    engine: Engine,
    snapshot_dir: str | Path | None = None,
    post=None,
) -> FastAPI:
    """Build the API. ``post`` overrides the webhook transport (tests)."""
    app = FastAPI(title="hotcount")
    cache = SnapshotCache(engine)
    hooks: list[WebhookRegistration] = []
    app.state.engine = engine
    app.state.webhooks = hooks
    app.state.deliveries = []

    def publish(events: list[RetrainEvent], tasks: BackgroundTasks) -> None:
        if not events:
            return
        if snapshot_dir is not None:
            data, _ = cache.get()
            save_snapshot_file(Path(snapshot_dir) / SNAPSHOT_NAME, data)
        for ev in events:
            tasks.add_task(_deliver, ev)

    def _deliver(ev: RetrainEvent) -> None:
        _, token = cache.get()
        app.state.deliveries.append(notify_retrain(ev, list(hooks), post=post, engine_version=token))

    @app.exception_handler(HotcountError)
    async def _domain_error(request: Request, exc: HotcountError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=422, content={"error": type(exc).__name__, "detail": str(exc)})

    @app.get("/v1/health")
    def health():
        return {
            "status": "ok",
            "engine_version": engine.version,
            "populating_window": engine.current.window_id,
            "sealed_windows": [w.window_id for w in engine.sealed_windows()],
            "hot_size": len(engine.hot),
        }

    @app.post("/v1/observe")
    async def observe(request: Request, tasks: BackgroundTasks):
        try:
            obs = _parse_observations(await request.json())
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, f"bad observation: {exc}") from exc
        events = engine.observe_many(obs)
        publish(events, tasks)
        return {"accepted": len(obs), "events": [e.to_dict() for e in events]}

    @app.post("/v1/featurize")
    async def featurize(request: Request):
        body = await request.json()
        rows = body["rows"] if "rows" in body else [body.get("values", body)]
        vecs = engine.featurize_many(rows)
        if "rows" in body:
            return {"vectors": [v.to_dict() for v in vecs]}
        return vecs[0].to_dict()

    @app.get("/v1/trainset")
    def trainset():
        rows = engine.get_train_set()

        def stream():
            for vec, label, p in rows:
                yield json.dumps({"features": vec.to_dict(), "label": label, "p": p}) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.get("/v1/snapshot")
    def snapshot(request: Request):
        data, token = cache.get()
        if request.headers.get("If-None-Match") == token:
            return Response(status_code=304, headers={"ETag": token})
        return Response(content=data, media_type="application/octet-stream", headers={"ETag": token})

    @app.post("/v1/rollover")
    def rollover(tasks: BackgroundTasks):
        ev = engine.roll_window()
        publish([ev] if ev else [], tasks)
        return {"event": ev.to_dict() if ev else None, "engine_version": engine.version}

    @app.post("/v1/webhooks")
    async def register(request: Request):
        body = await request.json()
        if "url" not in body:
            raise HTTPException(422, "url is required")
        reg = WebhookRegistration(body["url"], int(body.get("retries", 3)))
        hooks.append(reg)
        return {"registered": reg.url, "count": len(hooks)}

    @app.get("/v1/ledger")
    def ledger():
        return engine.ledger.to_dict()

    return app
