import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import make_engine, obs
from hotcount.lifecycle import RetrainEvent
from hotcount.service.client import SnapshotClient, http_fetcher
from hotcount.service.http import SNAPSHOT_NAME, create_app
from hotcount.service.snapshot import load_snapshot_file, serialize_snapshot, version_token
from hotcount.service.webhooks import WebhookRegistration, notify_retrain


class ScriptedStub:
    """Local HTTP endpoint answering with a fixed sequence of status codes."""

    def __init__(self, statuses):
        self.statuses = list(statuses)
        self.received = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                stub.received.append(json.loads(body))
                code = stub.statuses.pop(0) if stub.statuses else 200
                self.send_response(code)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/hook"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


EVENT = RetrainEvent("window_expired", (0,), 1, 123.0, 2)


class TestWebhooks:
    def test_no_registrations(self):
        assert notify_retrain(EVENT, []) == []

    def test_single_success(self):
        with ScriptedStub([200]) as stub:
            (res,) = notify_retrain(EVENT, [WebhookRegistration(stub.url)], sleep=lambda s: None)
        assert res.delivered and res.attempts == 1
        assert stub.received[0]["reason"] == "window_expired"
        assert stub.received[0]["expired_window_ids"] == [0]
        assert "engine_version" in stub.received[0]

    def test_fail_twice_then_succeed(self):
        delays = []
        with ScriptedStub([500, 503, 200]) as stub:
            (res,) = notify_retrain(EVENT, [WebhookRegistration(stub.url, retries=3)], sleep=delays.append, base_delay=0.5)
        assert res.delivered and res.attempts == 3
        assert len(stub.received) == 3
        assert delays == [0.5, 1.0]

    def test_exhausted_not_fatal(self):
        reg = WebhookRegistration("http://x", retries=2)
        (res,) = notify_retrain(EVENT, [reg], post=lambda u, p: 500, sleep=lambda s: None)
        assert not res.delivered and res.attempts == 3 and res.error == "HTTP 500"
        assert reg.last_status.startswith("failed")

    def test_transport_errors_retried(self):
        calls = []

        def post(url, payload):
            calls.append(url)
            if len(calls) == 1:
                raise ConnectionError("refused")
            return 204

        (res,) = notify_retrain(EVENT, [WebhookRegistration("http://x")], post=post, sleep=lambda s: None)
        assert res.delivered and res.attempts == 2


@pytest.fixture
def app_client(schema, tmp_path):
    engine = make_engine(schema, retention=2)
    posted = []
    app = create_app(engine, snapshot_dir=tmp_path, post=lambda url, payload: posted.append((url, payload)) or 200)
    with TestClient(app) as client:
        yield client, engine, posted, tmp_path


class TestHTTP:
    def test_health(self, app_client):
        client, *_ = app_client
        r = client.get("/v1/health")
        assert r.status_code == 200 and r.json()["status"] == "ok"

    def test_observe_featurize_roundtrip(self, app_client):
        client, engine, posted, tmp = app_client
        batch = [obs("u", "i", 1).to_dict() for _ in range(25)]
        assert client.post("/v1/observe", json={"observations": batch}).json()["accepted"] == 25
        assert client.post("/v1/observe", json=obs("u", "i", 0).to_dict()).json()["accepted"] == 1
        client.post("/v1/webhooks", json={"url": "http://model/retrain"})
        r = client.post("/v1/rollover").json()
        assert r["event"]["reason"] == "window_sealed"
        assert posted and posted[0][0] == "http://model/retrain"
        assert (tmp / SNAPSHOT_NAME).exists()
        vec = client.post("/v1/featurize", json={"values": {"user": "u", "item": "i"}}).json()
        probs = [e["probability"] for e in vec["entries"] if e["source"] == "user"]
        assert probs == pytest.approx([1 / 26, 25 / 26])
        assert vec == engine.featurize({"user": "u", "item": "i"}).to_dict()
        many = client.post("/v1/featurize", json={"rows": [{"user": "u", "item": "i"}] * 2}).json()
        assert len(many["vectors"]) == 2

    def test_trainset_stream(self, app_client):
        client, engine, *_ = app_client
        client.post("/v1/observe", json=[obs(i, 0, i % 2).to_dict() for i in range(7)])
        lines = client.get("/v1/trainset").text.strip().split("\n")
        assert len(lines) == 7
        assert json.loads(lines[0])["label"] == "0"

    def test_bad_input(self, app_client):
        client, *_ = app_client
        assert client.post("/v1/observe", json={"values": {"user": "a"}, "label": "0"}).status_code == 422
        assert client.post("/v1/observe", json={"nope": 1}).status_code == 422
        assert client.post("/v1/featurize", json={"values": {"user": "a"}}).status_code == 422
        assert client.post("/v1/webhooks", json={}).status_code == 422

    def test_snapshot_etag(self, app_client):
        client, engine, *_ = app_client
        client.post("/v1/rollover")
        r = client.get("/v1/snapshot")
        assert r.status_code == 200
        token = r.headers["ETag"]
        assert token == version_token(r.content)
        assert client.get("/v1/snapshot", headers={"If-None-Match": token}).status_code == 304
        client.post("/v1/rollover")
        assert client.get("/v1/snapshot", headers={"If-None-Match": token}).status_code == 200

    def test_ledger(self, app_client):
        client, engine, *_ = app_client
        assert client.get("/v1/ledger").json() == engine.ledger.to_dict()

    def test_expiry_event(self, app_client):
        client, *_ = app_client
        events = [client.post("/v1/rollover").json()["event"] for _ in range(3)]
        assert events[2]["reason"] == "window_expired" and events[2]["expired_window_ids"] == [0]


class TestSnapshotClient:
    def _engine(self, schema):
        e = make_engine(schema)
        for _ in range(30):
            e.observe(obs("u", "i", 1))
        e.roll_window()
        return e

    def test_cached_makes_no_calls(self, schema):
        e = self._engine(schema)
        data = serialize_snapshot(e)
        c = SnapshotClient(lambda token: (data, version_token(data)), cached=True)
        c.sync()
        before = c.network_calls
        for _ in range(50):
            c.featurize({"user": "u", "item": "i"})
        assert c.network_calls - before == 0

    def test_uncached_fetches_every_call(self, schema):
        e = self._engine(schema)
        data = serialize_snapshot(e)
        c = SnapshotClient(lambda token: (data, version_token(data)), cached=False)
        for _ in range(5):
            c.featurize({"user": "u", "item": "i"})
        assert c.network_calls == 5

    def test_over_http(self, schema):
        e = self._engine(schema)
        with TestClient(create_app(e)) as tc:
            c = SnapshotClient(http_fetcher("", tc))
            assert c.sync()
            assert not c.sync()  # 304: unchanged
            x = {"user": "u", "item": "i"}
            assert c.featurize(x).to_dict() == e.featurize(x).to_dict()
            e.observe(obs("v", "i", 0))
            e.roll_window()
            assert c.sync()
            assert c.view.engine_version == e.version
