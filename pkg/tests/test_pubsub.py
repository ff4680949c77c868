import http.server
import json
import threading

import pytest

from tilepress.clock import VirtualClock, WallClock
from tilepress.pubsub import (
    Broker,
    MalformedEnvelope,
    Message,
    UnknownTopic,
    build_push_body,
    parse_push_body,
)


def run_virtual(body):
    """Run ``body(clock)`` inside a fresh virtual-clock session."""
    clock = VirtualClock(limit=100_000)
    with clock.session():
        result = body(clock)
    assert clock.failures == [], clock.failures
    return result


class TestPublish:
    def test_fan_out_to_two_subscriptions(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            got = {"a": [], "b": []}
            broker.create_subscription("a", "t", lambda b: (got["a"].append(b), 200)[1])
            broker.create_subscription("b", "t", lambda b: (got["b"].append(b), 200)[1])
            broker.publish("t", {"eventType": "OBJECT_FINALIZE", "k": "v"})
            assert broker.wait_quiescent("a", 60)
            assert broker.wait_quiescent("b", 60)
            broker.close()
            return got

        got = run_virtual(scenario)
        (ma, sa) = parse_push_body(got["a"][0])
        (mb, sb) = parse_push_body(got["b"][0])
        assert ma.attributes == mb.attributes
        assert ma.message_id == mb.message_id
        assert (sa, sb) == ("a", "b")

    def test_no_subscriptions_drops_message(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            mid = broker.publish("t", {"x": "1"})
            clock.sleep(120)
            broker.close()
            return mid

        assert run_virtual(scenario)

    def test_unknown_topic(self):
        def scenario(clock):
            broker = Broker(clock)
            with pytest.raises(UnknownTopic):
                broker.publish("missing", {})
            broker.close()

        run_virtual(scenario)

    def test_1000_ids_strictly_increasing(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            ids = [broker.publish("t", {}) for _ in range(1000)]
            broker.close()
            return ids

        ids = run_virtual(scenario)
        assert len(set(ids)) == 1000
        assert ids == sorted(ids)


class TestDelivery:
    def test_single_delivery_acked(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            posts = []
            broker.create_subscription("s", "t", lambda b: (posts.append(b), 200)[1])
            broker.publish("t", {"n": "1"})
            assert broker.wait_quiescent("s", 60)
            stats = broker.stats("s")
            broker.close()
            return posts, stats

        posts, stats = run_virtual(scenario)
        assert len(posts) == 1
        assert (stats.published, stats.acked, stats.dead_lettered) == (1, 1, 0)

    def test_retry_after_500_then_ack(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            statuses = [500, 200]
            posts = []

            def ep(body):
                posts.append(clock.now())
                return statuses[len(posts) - 1]

            broker.create_subscription("s", "t", ep)
            broker.publish("t", {})
            assert broker.wait_quiescent("s", 60)
            stats = broker.stats("s")
            broker.close()
            return posts, stats

        posts, stats = run_virtual(scenario)
        assert len(posts) == 2
        assert stats.acked == 1
        assert posts[1] - posts[0] == pytest.approx(0.5)  # first backoff step

    def test_hang_past_deadline_dead_letters_after_budget(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            dead_got = []
            posts = []

            def hang(body):
                posts.append(clock.now())
                clock.sleep(10.0)  # deadline is 2s; always too late
                return 200

            broker.create_subscription(
                "s", "t", hang, ack_deadline=2.0, max_delivery_attempts=3, dead_letter="dead"
            )
            broker.create_subscription("sink", "dead", lambda b: (dead_got.append(b), 200)[1])
            broker.publish("t", {"slide": "x"})
            assert broker.wait_quiescent("s", 600)
            assert broker.wait_quiescent("sink", 600)
            stats = broker.stats("s")
            broker.close()
            return posts, stats, dead_got

        posts, stats, dead_got = run_virtual(scenario)
        assert len(posts) == 3  # attempt budget spent
        assert stats.dead_lettered == 1
        assert stats.acked == 0
        message, _ = parse_push_body(dead_got[0])
        assert message.attributes["slide"] == "x"

    def test_connection_error_counts_as_attempt(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            calls = []

            def flaky(body):
                calls.append(1)
                if len(calls) == 1:
                    raise ConnectionError("refused")
                return 200

            broker.create_subscription("s", "t", flaky)
            broker.publish("t", {})
            assert broker.wait_quiescent("s", 60)
            stats = broker.stats("s")
            broker.close()
            return calls, stats

        calls, stats = run_virtual(scenario)
        assert len(calls) == 2
        assert stats.acked == 1


class TestAckNack:
    def test_manual_ack_prevents_redelivery(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            posts = []

            def slow_fail(body):
                posts.append(body)
                clock.sleep(5.0)
                return 500  # late failure; stale by then

            broker.create_subscription("s", "t", slow_fail, ack_deadline=30.0)
            mid = broker.publish("t", {})
            clock.sleep(1.0)  # let the delivery go in flight
            broker.ack("s", mid)
            broker.ack("s", mid)  # duplicate ack: warning no-op
            clock.sleep(120.0)
            stats = broker.stats("s")
            broker.close()
            return posts, stats

        posts, stats = run_virtual(scenario)
        assert len(posts) == 1
        assert stats.acked == 1
        assert stats.pending == stats.in_flight == 0

    def test_nack_triggers_immediate_redelivery(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            posts = []

            def ep(body):
                posts.append(clock.now())
                if len(posts) == 1:
                    clock.sleep(5.0)  # hold attempt 1 in flight
                    return 500
                return 200

            broker.create_subscription("s", "t", ep, ack_deadline=30.0)
            mid = broker.publish("t", {})
            clock.sleep(1.0)
            broker.nack("s", mid)
            assert broker.wait_quiescent("s", 120)
            stats = broker.stats("s")
            broker.close()
            return posts, stats

        posts, stats = run_virtual(scenario)
        assert len(posts) == 2
        assert posts[1] == pytest.approx(1.0)  # straight after the nack
        assert stats.acked == 1


class TestAccounting:
    def test_conservation_under_mixed_outcomes(self):
        def scenario(clock):
            broker = Broker(clock)
            broker.create_topic("t")
            seen = {}

            def ep(body):
                m, _ = parse_push_body(body)
                n = seen.setdefault(m.message_id, 0)
                seen[m.message_id] = n + 1
                idx = int(m.message_id)
                if idx % 5 == 0:
                    return 500  # always fails -> dead letters
                if idx % 3 == 0 and n == 0:
                    return 503  # fails once
                return 200

            broker.create_subscription("s", "t", ep, max_delivery_attempts=3)
            for i in range(40):
                broker.publish("t", {"i": str(i)})
            assert broker.wait_quiescent("s", 10_000)
            stats = broker.stats("s")
            broker.close()
            return stats

        stats = run_virtual(scenario)
        assert stats.published == 40
        assert stats.pending == stats.in_flight == 0
        assert stats.acked + stats.dead_lettered == 40
        assert stats.dead_lettered == 8  # multiples of 5 among ids 1..40
        assert stats.accounted == stats.published


class TestWireFormat:
    def test_golden_body(self):
        message = Message(
            message_id="000000000042",
            publish_time=1700000000.125,
            attributes={
                "eventType": "OBJECT_FINALIZE",
                "bucketId": "landing",
                "objectId": "slide-001.spyr",
                "eventTime": "2023-11-14T22:13:20.125Z",
            },
            data=b"\x01\x02",
        )
        body = build_push_body(message, "wsi-sub")
        expect = (
            '{"message":{"messageId":"000000000042",'
            '"publishTime":"2023-11-14T22:13:20.125Z",'
            '"attributes":{"eventType":"OBJECT_FINALIZE","bucketId":"landing",'
            '"objectId":"slide-001.spyr","eventTime":"2023-11-14T22:13:20.125Z"},'
            '"data":"AQI="},"subscription":"wsi-sub"}'
        ).encode()
        assert body == expect

    def test_round_trip(self):
        message = Message("7", 123.456, {"a": "b"}, b"payload")
        got, sub = parse_push_body(build_push_body(message, "s"))
        assert sub == "s"
        assert got.message_id == "7"
        assert got.attributes == {"a": "b"}
        assert got.data == b"payload"
        assert got.publish_time == pytest.approx(123.456, abs=0.001)

    @pytest.mark.parametrize(
        "body", [b"", b"not json", b"{}", b'{"message":{}}', b'{"message":{"messageId":"1"}}']
    )
    def test_malformed(self, body):
        with pytest.raises(MalformedEnvelope):
            parse_push_body(body)


class TestHttpPush:
    def test_real_http_delivery(self):
        received = []

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                received.append(
                    (self.headers["Content-Type"], self.rfile.read(length))
                )
                self.send_response(200)
                self.end_headers()

            def log_message(self, *a):
                pass

        server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        port = server.server_address[1]
        t = threading.Thread(target=server.serve_forever, daemon=True)
        t.start()
        try:
            broker = Broker(WallClock())
            broker.create_topic("t")
            broker.create_subscription("s", "t", f"http://127.0.0.1:{port}/push")
            broker.publish("t", {"eventType": "OBJECT_FINALIZE"})
            assert broker.wait_quiescent("s", 10)
            broker.close()
        finally:
            server.shutdown()
        assert len(received) == 1
        ctype, body = received[0]
        assert ctype == "application/json"
        assert json.loads(body)["subscription"] == "s"
