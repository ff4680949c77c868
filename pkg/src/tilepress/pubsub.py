"""Topic-based pub/sub broker with push subscriptions.

Publishers send messages to named topics; each subscription POSTs every
message to its endpoint (an HTTP URL, or an in-process callable taking the
body bytes and returning a status code). A 2xx response acks the message;
anything else — including ack-deadline expiry or a connection error —
returns it to pending with exponential backoff until the delivery-attempt
budget is spent, at which point it moves to the dead-letter topic.

Semantics are at-least-once: subscribers must tolerate duplicates.
Message ordering is not guaranteed.
"""

from __future__ import annotations

import base64
import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Union

from .clock import WallClock
from .util import parse_rfc3339, rfc3339_ms

log = logging.getLogger("tilepress.pubsub")

DEFAULT_ACK_DEADLINE = 60.0
DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_DEAD_LETTER = "wsi-dicom-dead"
BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0

Endpoint = Union[str, Callable[[bytes], object]]

_PENDING = "pending"
_INFLIGHT = "in-flight"
_ACKED = "acked"
_DEAD = "dead-lettered"


class PubSubError(Exception):
    pass


class UnknownTopic(PubSubError):
    pass


class UnknownSubscription(PubSubError):
    pass


class MalformedEnvelope(PubSubError):
    pass


@dataclass(frozen=True)
class Message:
    message_id: str
    publish_time: float
    attributes: dict
    data: bytes


@dataclass(frozen=True)
class Subscription:
    name: str
    topic: str
    endpoint: Endpoint
    ack_deadline: float = DEFAULT_ACK_DEADLINE
    max_delivery_attempts: int = DEFAULT_MAX_ATTEMPTS
    dead_letter: Optional[str] = DEFAULT_DEAD_LETTER

    def __post_init__(self):
        if self.ack_deadline <= 0:
            raise ValueError("ack_deadline must be > 0")
        if self.max_delivery_attempts < 1:
            raise ValueError("max_delivery_attempts must be >= 1")


@dataclass
class SubscriptionStats:
    published: int = 0
    acked: int = 0
    dead_lettered: int = 0
    pending: int = 0
    in_flight: int = 0

    @property
    def accounted(self) -> int:
        return self.acked + self.dead_lettered + self.pending + self.in_flight


def build_push_body(message: Message, subscription: str) -> bytes:
    """The push wire format: UTF-8 JSON, stable key order."""
    payload = {
        "message": {
            "messageId": message.message_id,
            "publishTime": rfc3339_ms(message.publish_time),
            "attributes": message.attributes,
            "data": base64.b64encode(message.data).decode("ascii"),
        },
        "subscription": subscription,
    }
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


def parse_push_body(body: bytes) -> tuple[Message, str]:
    try:
        payload = json.loads(body.decode("utf-8"))
        m = payload["message"]
        message = Message(
            message_id=str(m["messageId"]),
            publish_time=parse_rfc3339(m["publishTime"]),
            attributes=dict(m["attributes"]),
            data=base64.b64decode(m["data"]),
        )
        return message, str(payload["subscription"])
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedEnvelope(f"bad push envelope: {e}") from e


def call_endpoint(endpoint: Endpoint, body: bytes, timeout: float):
    """POST to a URL or invoke a callable; returns the HTTP status code."""
    if callable(endpoint):
        result = endpoint(body)
        return result[0] if isinstance(result, tuple) else int(result)
    req = urllib.request.Request(
        endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status
    except urllib.error.HTTPError as e:
        return e.code


class _Delivery:
    __slots__ = ("message", "state", "attempts", "next_due", "deadline_at", "token")

    def __init__(self, message: Message, now: float):
        self.message = message
        self.state = _PENDING
        self.attempts = 0
        self.next_due = now
        self.deadline_at = 0.0
        self.token = 0


class _SubState:
    def __init__(self, sub: Subscription):
        self.sub = sub
        self.deliveries: dict[str, _Delivery] = {}
        self.published = 0
        self.acked = 0
        self.dead_lettered = 0


class Broker:
    """In-memory broker with an optional append-only journal file."""

    def __init__(self, clock=None, journal_path=None):
        self.clock = clock or WallClock()
        self._cond = self.clock.condition()
        self._topics: dict[str, list[str]] = {}
        self._subs: dict[str, _SubState] = {}
        self._counter = 0
        self._stopped = False
        self._dispatchers = 0
        self._attempts_live = 0
        self._journal = open(journal_path, "a", encoding="utf-8") if journal_path else None

    # -- wiring ---------------------------------------------------------------

    def create_topic(self, name: str) -> None:
        with self._cond:
            self._topics.setdefault(name, [])

    def create_subscription(
        self,
        name: str,
        topic: str,
        endpoint: Endpoint,
        ack_deadline: float = DEFAULT_ACK_DEADLINE,
        max_delivery_attempts: int = DEFAULT_MAX_ATTEMPTS,
        dead_letter: Optional[str] = DEFAULT_DEAD_LETTER,
    ) -> Subscription:
        sub = Subscription(name, topic, endpoint, ack_deadline, max_delivery_attempts, dead_letter)
        with self._cond:
            if topic not in self._topics:
                raise UnknownTopic(topic)
            if name in self._subs:
                raise ValueError(f"subscription {name!r} already exists")
            if dead_letter is not None:
                self._topics.setdefault(dead_letter, [])
            self._subs[name] = _SubState(sub)
            self._topics[topic].append(name)
            self._dispatchers += 1
        self.clock.spawn(partial(self._dispatch_loop, name), name=f"pubsub-dispatch-{name}")
        return sub

    def topic_sink(self, topic: str) -> Callable[[dict, bytes], None]:
        """A notification sink handing events to ``topic`` (for object stores)."""

        def sink(attributes: dict, data: bytes) -> None:
            self.publish(topic, attributes, data)

        return sink

    # -- publishing -----------------------------------------------------------

    def publish(self, topic: str, attributes: dict, data: bytes = b"") -> str:
        with self._cond:
            mid = self._publish_locked(topic, attributes, data)
            self._cond.notify_all()
        return mid

    def _publish_locked(self, topic: str, attributes: dict, data: bytes) -> str:
        if topic not in self._topics:
            raise UnknownTopic(topic)
        self._counter += 1
        mid = f"{self._counter:012d}"
        now = self.clock.now()
        message = Message(mid, now, dict(attributes), bytes(data))
        self._journal_write({"op": "publish", "topic": topic, "messageId": mid, "publishTime": rfc3339_ms(now)})
        for sub_name in self._topics[topic]:
            state = self._subs[sub_name]
            state.deliveries[mid] = _Delivery(message, now)
            state.published += 1
        return mid

    # -- acknowledgment -------------------------------------------------------

    def ack(self, subscription: str, message_id: str) -> None:
        """Acknowledge an in-flight message; duplicate acks are no-op warnings."""
        with self._cond:
            state = self._sub_state(subscription)
            d = state.deliveries.get(message_id)
            if d is None or d.state != _INFLIGHT:
                log.warning("ack ignored sub=%s mid=%s (not in flight)", subscription, message_id)
                return
            self._complete_locked(state, d, d.token, ok=True)
            self._cond.notify_all()

    def nack(self, subscription: str, message_id: str) -> None:
        """Return an in-flight message to pending for immediate redelivery."""
        with self._cond:
            state = self._sub_state(subscription)
            d = state.deliveries.get(message_id)
            if d is None or d.state != _INFLIGHT:
                log.warning("nack ignored sub=%s mid=%s (not in flight)", subscription, message_id)
                return
            d.state = _PENDING
            d.next_due = self.clock.now()
            self._cond.notify_all()

    # -- introspection ----------------------------------------------------------

    def stats(self, subscription: str) -> SubscriptionStats:
        with self._cond:
            state = self._sub_state(subscription)
            by_state = {_PENDING: 0, _INFLIGHT: 0}
            for d in state.deliveries.values():
                by_state[d.state] += 1
            return SubscriptionStats(
                published=state.published,
                acked=state.acked,
                dead_lettered=state.dead_lettered,
                pending=by_state[_PENDING],
                in_flight=by_state[_INFLIGHT],
            )

    def wait_quiescent(self, subscription: str, timeout: Optional[float] = None) -> bool:
        """Block until every fanned-out message is acked or dead-lettered."""
        with self._cond:
            state = self._sub_state(subscription)
            return self._cond.wait_for(lambda: not state.deliveries, timeout)

    def _sub_state(self, name: str) -> _SubState:
        state = self._subs.get(name)
        if state is None:
            raise UnknownSubscription(name)
        return state

    # -- delivery engine --------------------------------------------------------

    def _dispatch_loop(self, sub_name: str) -> None:
        state = self._subs[sub_name]
        sub = state.sub
        cond = self._cond
        while True:
            to_send = []
            with cond:
                while True:
                    if self._stopped:
                        self._dispatchers -= 1
                        cond.notify_all()
                        return
                    now = self.clock.now()
                    for d in list(state.deliveries.values()):
                        if d.state == _INFLIGHT and d.deadline_at <= now:
                            log.warning(
                                "ack deadline expired sub=%s mid=%s attempt=%d",
                                sub_name, d.message.message_id, d.attempts,
                            )
                            self._complete_locked(state, d, d.token, ok=False)
                    due = [
                        d for d in state.deliveries.values()
                        if d.state == _PENDING and d.next_due <= now
                    ]
                    if due:
                        for d in due:
                            d.state = _INFLIGHT
                            d.attempts += 1
                            d.token += 1
                            d.deadline_at = now + sub.ack_deadline
                            self._attempts_live += 1
                            to_send.append((d, d.token, build_push_body(d.message, sub_name)))
                        break
                    waits = [d.next_due for d in state.deliveries.values() if d.state == _PENDING]
                    waits += [d.deadline_at for d in state.deliveries.values() if d.state == _INFLIGHT]
                    cond.wait(min(waits) - now if waits else None)
            for d, token, body in to_send:
                self.clock.spawn(
                    partial(self._attempt, state, d, token, body),
                    name=f"pubsub-deliver-{sub_name}-{d.message.message_id}-{token}",
                )

    def _attempt(self, state: _SubState, d: _Delivery, token: int, body: bytes) -> None:
        sub = state.sub
        status = None
        try:
            status = call_endpoint(sub.endpoint, body, timeout=sub.ack_deadline)
        except Exception as e:
            log.warning("delivery error sub=%s mid=%s: %s", sub.name, d.message.message_id, e)
        with self._cond:
            self._attempts_live -= 1
            try:
                ok = status is not None and 200 <= int(status) < 300
                self._complete_locked(state, d, token, ok)
            finally:
                self._cond.notify_all()

    def _complete_locked(self, state: _SubState, d: _Delivery, token: int, ok: bool) -> None:
        if d.state != _INFLIGHT or d.token != token:
            log.warning(
                "stale completion sub=%s mid=%s token=%d (current state=%s)",
                state.sub.name, d.message.message_id, token, d.state,
            )
            return
        mid = d.message.message_id
        if ok:
            d.state = _ACKED
            state.acked += 1
            del state.deliveries[mid]
            self._journal_write({"op": "ack", "subscription": state.sub.name, "messageId": mid})
            return
        if d.attempts >= state.sub.max_delivery_attempts:
            d.state = _DEAD
            state.dead_lettered += 1
            del state.deliveries[mid]
            self._journal_write({"op": "dead", "subscription": state.sub.name, "messageId": mid})
            if state.sub.dead_letter is not None:
                self._publish_locked(state.sub.dead_letter, d.message.attributes, d.message.data)
            else:
                log.error(
                    "dropping message %s on sub=%s: attempt budget spent, no dead-letter topic",
                    mid, state.sub.name,
                )
            return
        d.state = _PENDING
        d.next_due = self.clock.now() + min(BACKOFF_CAP, BACKOFF_BASE * 2 ** (d.attempts - 1))

    def _journal_write(self, entry: dict) -> None:
        if self._journal is not None:
            self._journal.write(json.dumps(entry) + "\n")
            self._journal.flush()

    def close(self) -> None:
        """Stop dispatchers and wait for in-flight delivery attempts to land."""
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
            self._cond.wait_for(lambda: self._dispatchers == 0 and self._attempts_live == 0)
        if self._journal is not None:
            self._journal.close()
            self._journal = None
