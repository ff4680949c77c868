"""Directory-backed object storage with creation events.

One directory per bucket; object bytes live at ``<root>/<bucket>/objects/<key>``
with a JSON metadata sidecar under ``<root>/<bucket>/meta/<key>.json``.
Buckets are write-once per key, and every successful put hands exactly one
OBJECT_FINALIZE event to the bucket's notification sink. Storage classes
are metadata labels moved by lifecycle rules; bytes never move.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .clock import WallClock
from .util import fnv1a64, parse_rfc3339, rfc3339_ms

log = logging.getLogger("tilepress.object_store")

EVENT_OBJECT_FINALIZE = "OBJECT_FINALIZE"

# sink(attributes, data) -> None; typically functools.partial(broker.publish, topic)
NotificationSink = Callable[[dict, bytes], None]


class StoreError(Exception):
    pass


class UnknownBucket(StoreError):
    pass


class KeyAlreadyExists(StoreError):
    pass


class NotFound(StoreError):
    pass


class DigestMismatch(StoreError):
    pass


class IoFailure(StoreError):
    pass


class StorageClass(enum.Enum):
    STANDARD = 0
    COLDLINE = 1
    ARCHIVE = 2

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class LifecycleRule:
    """Objects at least min_age seconds old move to target_class."""

    min_age: float
    target_class: StorageClass


@dataclass(frozen=True)
class ObjectRecord:
    bucket: str
    key: str
    size_bytes: int
    created_at: float  # epoch seconds, millisecond precision
    storage_class: StorageClass
    content_digest: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "bucket": self.bucket,
                "key": self.key,
                "size_bytes": self.size_bytes,
                "created_at": rfc3339_ms(self.created_at),
                "storage_class": self.storage_class.name,
                "content_digest": self.content_digest,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ObjectRecord":
        d = json.loads(text)
        return cls(
            bucket=d["bucket"],
            key=d["key"],
            size_bytes=d["size_bytes"],
            created_at=parse_rfc3339(d["created_at"]),
            storage_class=StorageClass[d["storage_class"]],
            content_digest=d["content_digest"],
        )


def _validate_rules(rules: Iterable[LifecycleRule]) -> list[LifecycleRule]:
    rules = list(rules)
    ages = {r.target_class: r.min_age for r in rules}
    if StorageClass.ARCHIVE in ages and StorageClass.COLDLINE in ages:
        if ages[StorageClass.ARCHIVE] <= ages[StorageClass.COLDLINE]:
            raise ValueError("ARCHIVE min_age must exceed COLDLINE min_age")
    return rules


def _validate_key(key: str) -> str:
    if not key:
        raise ValueError("object key must be non-empty")
    parts = key.split("/")
    if key.startswith("/") or any(p in ("", ".", "..") for p in parts):
        raise ValueError(f"unsafe object key {key!r}")
    return key


class _Bucket:
    def __init__(self, rules: list[LifecycleRule], sink: Optional[NotificationSink]):
        self.rules = rules
        self.sink = sink
        self.key_locks: dict[str, threading.Lock] = {}


class ObjectStore:
    """Thread-safe landing-zone store; concurrent puts/gets to distinct keys."""

    def __init__(self, root: str | Path, clock=None):
        self.root = Path(root)
        self.clock = clock or WallClock()
        self._lock = threading.Lock()
        self._buckets: dict[str, _Bucket] = {}
        self.root.mkdir(parents=True, exist_ok=True)

    # -- buckets --------------------------------------------------------------

    def create_bucket(
        self,
        name: str,
        rules: Iterable[LifecycleRule] = (),
        notification: Optional[NotificationSink] = None,
    ) -> None:
        with self._lock:
            if name in self._buckets:
                raise KeyAlreadyExists(f"bucket {name!r} already exists")
            (self.root / name / "objects").mkdir(parents=True, exist_ok=True)
            (self.root / name / "meta").mkdir(parents=True, exist_ok=True)
            self._buckets[name] = _Bucket(_validate_rules(rules), notification)

    def configure_notification(self, bucket: str, sink: Optional[NotificationSink]) -> None:
        self._bucket(bucket).sink = sink

    def _bucket(self, name: str) -> _Bucket:
        with self._lock:
            b = self._buckets.get(name)
        if b is None:
            raise UnknownBucket(name)
        return b

    def _key_lock(self, bucket: _Bucket, key: str) -> threading.Lock:
        with self._lock:
            return bucket.key_locks.setdefault(key, threading.Lock())

    def _paths(self, bucket: str, key: str) -> tuple[Path, Path]:
        return (
            self.root / bucket / "objects" / key,
            self.root / bucket / "meta" / (key + ".json"),
        )

    # -- operations -----------------------------------------------------------

    def put_object(self, bucket: str, key: str, data: bytes) -> ObjectRecord:
        _validate_key(key)
        b = self._bucket(bucket)
        obj_path, meta_path = self._paths(bucket, key)
        with self._key_lock(b, key):
            if meta_path.exists() or obj_path.exists():
                raise KeyAlreadyExists(f"{bucket}/{key}")
            created = round(self.clock.now() * 1000.0) / 1000.0
            record = ObjectRecord(
                bucket=bucket,
                key=key,
                size_bytes=len(data),
                created_at=created,
                storage_class=StorageClass.STANDARD,
                content_digest=fnv1a64(data),
            )
            try:
                obj_path.parent.mkdir(parents=True, exist_ok=True)
                meta_path.parent.mkdir(parents=True, exist_ok=True)
                self._write_durably(obj_path, data)
                self._write_durably(meta_path, record.to_json().encode("utf-8"))
            except OSError as e:
                raise IoFailure(f"persisting {bucket}/{key}: {e}") from e
        if b.sink is not None:
            b.sink(
                {
                    "eventType": EVENT_OBJECT_FINALIZE,
                    "bucketId": bucket,
                    "objectId": key,
                    "eventTime": rfc3339_ms(created),
                    "size": str(len(data)),
                },
                b"",
            )
        log.info("put bucket=%s key=%s size=%d", bucket, key, len(data))
        return record

    @staticmethod
    def _write_durably(path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def get_object(self, bucket: str, key: str) -> tuple[bytes, ObjectRecord]:
        self._bucket(bucket)
        obj_path, meta_path = self._paths(bucket, key)
        try:
            record = ObjectRecord.from_json(meta_path.read_text("utf-8"))
            data = obj_path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{bucket}/{key}") from None
        except OSError as e:
            raise IoFailure(f"reading {bucket}/{key}: {e}") from e
        digest = fnv1a64(data)
        if digest != record.content_digest:
            raise DigestMismatch(
                f"{bucket}/{key}: stored digest {record.content_digest}, bytes hash to {digest}"
            )
        return data, record

    def head_object(self, bucket: str, key: str) -> ObjectRecord:
        self._bucket(bucket)
        _, meta_path = self._paths(bucket, key)
        try:
            return ObjectRecord.from_json(meta_path.read_text("utf-8"))
        except FileNotFoundError:
            raise NotFound(f"{bucket}/{key}") from None

    def list_objects(self, bucket: str) -> list[ObjectRecord]:
        self._bucket(bucket)
        meta_root = self.root / bucket / "meta"
        records = []
        for p in sorted(meta_root.rglob("*.json")):
            records.append(ObjectRecord.from_json(p.read_text("utf-8")))
        return records

    def apply_lifecycle(self, bucket: str, now: Optional[float] = None) -> int:
        """Advance storage classes by age; idempotent for a fixed ``now``."""
        b = self._bucket(bucket)
        if now is None:
            now = self.clock.now()
        transitions = 0
        for record in self.list_objects(bucket):
            age = now - record.created_at
            target = record.storage_class
            for rule in b.rules:
                if age >= rule.min_age and rule.target_class.value > target.value:
                    target = rule.target_class
            if target != record.storage_class:
                with self._key_lock(b, record.key):
                    _, meta_path = self._paths(bucket, record.key)
                    updated = ObjectRecord(
                        bucket=record.bucket,
                        key=record.key,
                        size_bytes=record.size_bytes,
                        created_at=record.created_at,
                        storage_class=target,
                        content_digest=record.content_digest,
                    )
                    try:
                        self._write_durably(meta_path, updated.to_json().encode("utf-8"))
                    except OSError as e:
                        raise IoFailure(f"lifecycle update {bucket}/{record.key}: {e}") from e
                transitions += 1
                log.info(
                    "lifecycle bucket=%s key=%s %s->%s",
                    bucket,
                    record.key,
                    record.storage_class.name,
                    target.name,
                )
        return transitions
