"""Retrain notifications.

Every retrain event is POSTed to each registered URL. Failed deliveries are
retried with exponential backoff up to the registration's retry budget; a
delivery that never succeeds is reported, never raised.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import httpx

from hotcount.lifecycle import RetrainEvent

log = logging.getLogger(__name__)

PostFn = Callable[[str, dict], int]


@dataclass
class WebhookRegistration:
    url: str
    retries: int = 3
    last_status: str | None = None


@dataclass
class DeliveryResult:
    url: str
    delivered: bool
    attempts: int
    error: str | None = None


def http_post(url: str, payload: dict, timeout: float = 5.0) -> int:
    return httpx.post(url, json=payload, timeout=timeout).status_code


def event_payload(event: RetrainEvent, engine_version: str | None = None) -> dict:
    d = event.to_dict()
    d["engine_version"] = engine_version if engine_version is not None else str(event.version)
    return d


def notify_retrain(
    event: RetrainEvent,
    registrations: Iterable[WebhookRegistration],
    post: PostFn | None = None,
    sleep: Callable[[float], None] = time.sleep,
    base_delay: float = 0.1,
    engine_version: str | None = None,
) -> list[DeliveryResult]:
    """Deliver ``event`` to every registration; returns one result per URL."""
    post = post or http_post
    payload = event_payload(event, engine_version)
    report = []
    for reg in registrations:
        attempts = 0
        error = None
        delivered = False
        while attempts <= reg.retries:
            if attempts:
                sleep(base_delay * 2 ** (attempts - 1))
            attempts += 1
            try:
                status = post(reg.url, payload)
            except Exception as exc:  # network errors count as failed attempts
                error = f"{type(exc).__name__}: {exc}"
                continue
            if 200 <= status < 300:
                delivered, error = True, None
                break
            error = f"HTTP {status}"
        reg.last_status = "delivered" if delivered else f"failed: {error}"
        if not delivered:
            log.warning("retrain webhook %s failed after %d attempts: %s", reg.url, attempts, error)
        report.append(DeliveryResult(reg.url, delivered, attempts, error))
    return report
