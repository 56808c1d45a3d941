"""Snapshot replication for application servers.

A :class:`SnapshotClient` pulls the central snapshot and featurizes locally.
In cached mode the only network traffic is the explicit :meth:`sync` poll;
uncached mode fetches the snapshot for every request, which is what the
cache avoids.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping, Sequence

import httpx

from hotcount.service.snapshot import SnapshotView, deserialize_snapshot
from hotcount.tables import FeaturizedVector

# fetch(token) -> (body or None when unchanged, token)
Fetcher = Callable[[str | None], tuple[bytes | None, str | None]]


def http_fetcher(base_url: str, client: httpx.Client | None = None) -> Fetcher:
    """Fetcher for ``GET /v1/snapshot`` honouring ``If-None-Match``."""
    client = client or httpx.Client(base_url=base_url)

    def fetch(token: str | None) -> tuple[bytes | None, str | None]:
        headers = {"If-None-Match": token} if token else {}
        r = client.get("/v1/snapshot", headers=headers)
        if r.status_code == 304:
            return None, token
        r.raise_for_status()
        return r.content, r.headers.get("ETag")

    return fetch


class SnapshotClient:
    def __init__(self, fetch: Fetcher, cached: bool = True):
        self._fetch = fetch
        self.cached = cached
        self.token: str | None = None
        self.view: SnapshotView | None = None
        self.network_calls = 0

    def sync(self) -> bool:
        """Poll for a newer snapshot; returns True when the local view changed."""
        self.network_calls += 1
        known = self.token if (self.cached and self.view is not None) else None
        body, token = self._fetch(known)
        if body is None:
            return False
        self.view = deserialize_snapshot(body)
        self.token = token
        return True

    def featurize(self, x: Mapping[str, Any]) -> FeaturizedVector:
        return self.featurize_many([x])[0]

    def featurize_many(self, rows: Sequence[Mapping[str, Any]]) -> list[FeaturizedVector]:
        if not self.cached or self.view is None:
            self.sync()
        return self.view.featurize_many(rows)
