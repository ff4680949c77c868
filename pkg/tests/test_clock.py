import pytest

from tilepress.clock import VirtualClock, WallClock


def test_virtual_sleep_advances_time_without_wall_delay():
    clock = VirtualClock()
    with clock.session():
        t0 = clock.now()
        clock.sleep(500.0)
        assert clock.now() == t0 + 500.0


def test_spawned_threads_interleave_deterministically():
    clock = VirtualClock()
    log = []

    def worker(name, delay):
        def run():
            clock.sleep(delay)
            log.append((clock.now(), name))

        return run

    with clock.session():
        clock.spawn(worker("b", 2.0), "b")
        clock.spawn(worker("a", 1.0), "a")
        clock.spawn(worker("c", 2.0), "c")
        clock.sleep(5.0)

    # Same-deadline wakeups resolve in block order: b before c.
    assert log == [(1.0, "a"), (2.0, "b"), (2.0, "c")]


def test_condition_wait_for_with_virtual_timeout():
    clock = VirtualClock()
    with clock.session():
        cond = clock.condition()
        flag = []

        def setter():
            clock.sleep(10.0)
            with cond:
                flag.append(1)
                cond.notify_all()

        clock.spawn(setter, "setter")
        with cond:
            assert cond.wait_for(lambda: flag, timeout=60.0)
        assert clock.now() == 10.0


def test_condition_timeout_expires_at_virtual_deadline():
    clock = VirtualClock()
    with clock.session():
        cond = clock.condition()
        with cond:
            assert cond.wait_for(lambda: False, timeout=7.5) is False
        assert clock.now() == 7.5


def test_deadlock_is_detected_not_hung():
    clock = VirtualClock()
    with pytest.raises(RuntimeError, match="deadlock"):
        with clock.session():
            cond = clock.condition()
            with cond:
                cond.wait()  # nobody will ever notify


def test_virtual_time_limit_aborts_runaway():
    clock = VirtualClock(limit=100.0)
    with pytest.raises(RuntimeError, match="limit"):
        with clock.session():
            clock.sleep(1000.0)


def test_worker_exception_is_captured():
    clock = VirtualClock()

    def bad():
        raise ValueError("boom")

    with clock.session():
        clock.spawn(bad, "bad")
        clock.sleep(1.0)
    assert len(clock.failures) == 1
    assert "boom" in clock.failures[0]


def test_rerun_is_bit_identical():
    def run_once():
        clock = VirtualClock()
        trace = []

        def worker(i):
            def body():
                for k in range(3):
                    clock.sleep(1.0 + i * 0.5)
                    trace.append((clock.now(), i, k))

            return body

        with clock.session():
            for i in range(4):
                clock.spawn(worker(i), f"w{i}")
            clock.sleep(100.0)
        return trace

    assert run_once() == run_once()


def test_wall_clock_basics():
    clock = WallClock()
    with clock.session():
        t0 = clock.now()
        clock.sleep(0.01)
        assert clock.now() >= t0
        cond = clock.condition()
        hits = []

        def t():
            with cond:
                hits.append(1)
                cond.notify_all()

        clock.spawn(t, "t")
        with cond:
            assert cond.wait_for(lambda: hits, timeout=2.0)
        assert hits == [1]
