import json
import threading

import pytest

from tilepress.object_store import (
    DigestMismatch,
    KeyAlreadyExists,
    LifecycleRule,
    NotFound,
    ObjectStore,
    StorageClass,
    UnknownBucket,
)

from .oracles import fnv1a64_hex, lifecycle_classes_naive

DAY = 86400.0


@pytest.fixture
def store(tmp_path):
    return ObjectStore(tmp_path / "buckets")


@pytest.fixture
def events(store):
    captured = []
    store.create_bucket("landing", notification=lambda attrs, data: captured.append(attrs))
    return captured


class TestPutGet:
    def test_round_trip_bit_exact(self, store, events):
        payload = bytes(range(256)) * 17
        rec = store.put_object("landing", "slide-001.spyr", payload)
        data, rec2 = store.get_object("landing", "slide-001.spyr")
        assert data == payload
        assert rec2 == rec
        assert rec.storage_class is StorageClass.STANDARD
        assert rec.size_bytes == len(payload)

    def test_one_event_per_put(self, store, events):
        store.put_object("landing", "a.spyr", b"x")
        assert len(events) == 1
        assert events[0]["eventType"] == "OBJECT_FINALIZE"
        assert events[0]["bucketId"] == "landing"
        assert events[0]["objectId"] == "a.spyr"
        assert events[0]["size"] == "1"
        assert events[0]["eventTime"].endswith("Z")

    def test_write_once(self, store, events):
        store.put_object("landing", "a.spyr", b"x")
        with pytest.raises(KeyAlreadyExists):
            store.put_object("landing", "a.spyr", b"y")
        assert len(events) == 1  # no second event

    def test_empty_blob_digest_matches_oracle(self, store, events):
        rec = store.put_object("landing", "empty", b"")
        assert rec.size_bytes == 0
        assert rec.content_digest == fnv1a64_hex(b"")
        assert len(events) == 1

    def test_digest_matches_oracle_for_content(self, store, events):
        rec = store.put_object("landing", "k", b"hello world")
        assert rec.content_digest == fnv1a64_hex(b"hello world")

    def test_not_found(self, store, events):
        with pytest.raises(NotFound):
            store.get_object("landing", "missing")

    def test_unknown_bucket(self, store):
        with pytest.raises(UnknownBucket):
            store.put_object("nope", "k", b"")
        with pytest.raises(UnknownBucket):
            store.get_object("nope", "k")
        with pytest.raises(UnknownBucket):
            store.apply_lifecycle("nope")

    def test_corruption_is_surfaced(self, store, events, tmp_path):
        store.put_object("landing", "c", b"good bytes")
        (tmp_path / "buckets" / "landing" / "objects" / "c").write_bytes(b"bad bytes!")
        with pytest.raises(DigestMismatch):
            store.get_object("landing", "c")

    @pytest.mark.parametrize("key", ["", "/abs", "a/../b", "a//b", "."])
    def test_unsafe_keys_rejected(self, store, events, key):
        with pytest.raises(ValueError):
            store.put_object("landing", key, b"")

    def test_nested_keys_and_layout(self, store, events, tmp_path):
        store.put_object("landing", "runs/2024/s.spyr", b"abc")
        obj = tmp_path / "buckets" / "landing" / "objects" / "runs" / "2024" / "s.spyr"
        assert obj.read_bytes() == b"abc"
        meta = json.loads(
            (tmp_path / "buckets" / "landing" / "meta" / "runs" / "2024" / "s.spyr.json").read_text()
        )
        assert meta["storage_class"] == "STANDARD"
        assert meta["created_at"].endswith("Z")


class TestLifecycle:
    def rules(self):
        return [
            LifecycleRule(30 * DAY, StorageClass.COLDLINE),
            LifecycleRule(365 * DAY, StorageClass.ARCHIVE),
        ]

    def test_single_transition(self, store):
        store.create_bucket("b", rules=[LifecycleRule(30 * DAY, StorageClass.COLDLINE)])
        rec = store.put_object("b", "k", b"x")
        assert store.apply_lifecycle("b", now=rec.created_at + 31 * DAY) == 1
        assert store.head_object("b", "k").storage_class is StorageClass.COLDLINE

    def test_idempotent(self, store):
        store.create_bucket("b", rules=self.rules())
        rec = store.put_object("b", "k", b"x")
        now = rec.created_at + 31 * DAY
        assert store.apply_lifecycle("b", now=now) == 1
        assert store.apply_lifecycle("b", now=now) == 0

    def test_skips_straight_to_archive(self, store):
        store.create_bucket("b", rules=self.rules())
        rec = store.put_object("b", "k", b"x")
        assert store.apply_lifecycle("b", now=rec.created_at + 400 * DAY) == 1
        assert store.head_object("b", "k").storage_class is StorageClass.ARCHIVE

    def test_no_events_emitted(self, store):
        captured = []
        store.create_bucket("b", rules=self.rules(), notification=lambda a, d: captured.append(a))
        rec = store.put_object("b", "k", b"x")
        store.apply_lifecycle("b", now=rec.created_at + 400 * DAY)
        assert len(captured) == 1  # only the put

    def test_get_unaffected_by_class(self, store):
        store.create_bucket("b", rules=self.rules())
        rec = store.put_object("b", "k", b"payload")
        store.apply_lifecycle("b", now=rec.created_at + 40 * DAY)
        data, rec2 = store.get_object("b", "k")
        assert data == b"payload"
        assert rec2.storage_class is StorageClass.COLDLINE

    def test_matches_brute_force_oracle(self, store):
        import random

        rng = random.Random(7)
        rules = [
            LifecycleRule(10.0, StorageClass.COLDLINE),
            LifecycleRule(50.0, StorageClass.ARCHIVE),
        ]
        store.create_bucket("b", rules=rules)
        recs = {}
        for i in range(20):
            recs[f"k{i}"] = store.put_object("b", f"k{i}", bytes([i]))
        base = max(r.created_at for r in recs.values())
        for offset in (0.0, 9.0, 10.0, 30.0, 50.0, 51.0, 200.0):
            now = base + offset
            store.apply_lifecycle("b", now=now)
            rule_pairs = [(r.min_age, r.target_class.name) for r in rules]
            for key, rec in recs.items():
                expect = lifecycle_classes_naive(now - rec.created_at, rule_pairs, "STANDARD")
                assert store.head_object("b", key).storage_class.name == expect

    def test_class_never_decreases(self, store):
        store.create_bucket("b", rules=self.rules())
        rec = store.put_object("b", "k", b"x")
        store.apply_lifecycle("b", now=rec.created_at + 400 * DAY)
        # A later pass with a clock that moved backwards must not downgrade.
        store.apply_lifecycle("b", now=rec.created_at + 1.0)
        assert store.head_object("b", "k").storage_class is StorageClass.ARCHIVE

    def test_archive_age_must_exceed_coldline(self, store):
        with pytest.raises(ValueError):
            store.create_bucket(
                "bad",
                rules=[
                    LifecycleRule(30 * DAY, StorageClass.COLDLINE),
                    LifecycleRule(30 * DAY, StorageClass.ARCHIVE),
                ],
            )


class TestConcurrency:
    def test_concurrent_puts_distinct_keys_one_event_each(self, store):
        events = []
        lock = threading.Lock()

        def sink(attrs, data):
            with lock:
                events.append(attrs["objectId"])

        store.create_bucket("c", notification=sink)
        errors = []

        def put(i):
            try:
                store.put_object("c", f"key-{i}", b"v" * i)
            except Exception as e:  # pragma: no cover
                errors.append(e)

        threads = [threading.Thread(target=put, args=(i,)) for i in range(32)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert sorted(events) == sorted(f"key-{i}" for i in range(32))

    def test_concurrent_same_key_exactly_one_winner(self, store):
        events = []
        store.create_bucket("c", notification=lambda a, d: events.append(a))
        outcomes = []

        def put():
            try:
                store.put_object("c", "same", b"x")
                outcomes.append("ok")
            except KeyAlreadyExists:
                outcomes.append("exists")

        threads = [threading.Thread(target=put) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert outcomes.count("ok") == 1
        assert len(events) == 1
