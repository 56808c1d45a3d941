"""Persistence, replication, webhooks and the HTTP API."""

from hotcount.service.snapshot import (
    FORMAT_VERSION,
    MAGIC,
    SnapshotView,
    deserialize_snapshot,
    load_snapshot_file,
    restore_engine,
    save_snapshot_file,
    serialize_snapshot,
)
from hotcount.service.webhooks import DeliveryResult, WebhookRegistration, notify_retrain

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "DeliveryResult",
    "SnapshotView",
    "WebhookRegistration",
    "deserialize_snapshot",
    "load_snapshot_file",
    "notify_retrain",
    "restore_engine",
    "save_snapshot_file",
    "serialize_snapshot",
]
