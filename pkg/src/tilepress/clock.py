"""Wall and simulated clocks behind one interface.

Every time-dependent component takes a clock. REAL runs use
:class:`WallClock`; simulated-work benchmark runs use :class:`VirtualClock`
so a 500-virtual-second experiment finishes in milliseconds of wall time
and produces bit-identical output on every rerun.

VirtualClock rules (token discipline):

- every participating thread is spawned via ``clock.spawn`` or registered
  with ``clock.session``/``register_current``;
- exactly one participant executes at a time; the rest are parked inside
  ``sleep``/condition waits;
- participants block *only* through clock primitives (``sleep``, or a
  condition obtained from ``clock.condition()``);
- virtual time advances only when every participant is blocked, jumping to
  the earliest pending deadline.

Wake order is FIFO over a deterministic ready queue, which is what makes
simulated runs repeatable down to the byte.
"""

from __future__ import annotations

import threading
import time
import traceback
from collections import deque
from typing import Callable, Optional


class WallClock:
    """Real time: a thin veneer over time.time/time.sleep/threading."""

    virtual = False

    def __init__(self) -> None:
        self.failures: list[str] = []

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def condition(self) -> threading.Condition:
        return threading.Condition()

    def spawn(self, target: Callable[[], None], name: str):
        def body():
            try:
                target()
            except BaseException:
                self.failures.append(f"{name}:\n{traceback.format_exc()}")

        t = threading.Thread(target=body, name=name, daemon=True)
        t.start()
        return t

    def register_current(self, name: str = "main") -> None:
        pass

    def unregister_current(self) -> None:
        pass

    def session(self, name: str = "main") -> "_ClockSession":
        return _ClockSession(self, name)


class _ClockSession:
    """Context manager pairing register_current/unregister_current."""

    def __init__(self, clock, name: str) -> None:
        self._clock = clock
        self._name = name

    def __enter__(self):
        self._clock.register_current(self._name)
        return self._clock

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self._clock.unregister_current()
        else:
            # Best effort: don't mask the original failure with teardown noise.
            try:
                self._clock.unregister_current()
            except Exception:
                pass


_READY = "ready"
_RUNNING = "running"
_BLOCKED = "blocked"
_DONE = "done"


class _SimThread:
    __slots__ = ("name", "state", "event", "deadline", "notified", "block_seq")

    def __init__(self, name: str) -> None:
        self.name = name
        self.state = _READY
        self.event = threading.Event()
        self.deadline: Optional[float] = None
        self.notified = False
        self.block_seq = 0

    def __repr__(self) -> str:
        return f"<{self.name} {self.state} deadline={self.deadline}>"


class VirtualClock:
    """Deterministic simulated clock over real threads.

    ``limit`` bounds virtual time as a runaway-simulation guard; exceeding
    it aborts every participant instead of spinning forever.
    """

    virtual = True

    def __init__(self, start: float = 0.0, limit: Optional[float] = None) -> None:
        self._lock = threading.Lock()
        self._now = float(start)
        self._threads: list[_SimThread] = []
        self._idents: dict[int, _SimThread] = {}
        self._ready: deque[_SimThread] = deque()
        self._running: Optional[_SimThread] = None
        self._seq = 0
        self._limit = limit
        self._dead: Optional[str] = None
        self.failures: list[str] = []

    # -- public interface ---------------------------------------------------

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        self._block_current(self.now() + max(seconds, 0.0))

    def condition(self) -> "_VirtualCondition":
        return _VirtualCondition(self)

    def spawn(self, target: Callable[[], None], name: str) -> _SimThread:
        with self._lock:
            self._check_poison()
            if self._running is None or self._idents.get(threading.get_ident()) is not self._running:
                raise RuntimeError("spawn must be called from the running clock participant")
            st = _SimThread(name)
            self._threads.append(st)
            self._ready.append(st)
        threading.Thread(target=self._thread_main, args=(st, target), name=name, daemon=True).start()
        return st

    def register_current(self, name: str = "main") -> None:
        with self._lock:
            self._check_poison()
            if self._running is not None:
                raise RuntimeError("a participant is already running; register before starting work")
            st = _SimThread(name)
            st.state = _RUNNING
            self._threads.append(st)
            self._idents[threading.get_ident()] = st
            self._running = st

    def unregister_current(self) -> None:
        with self._lock:
            st = self._idents.get(threading.get_ident())
            if st is None or self._running is not st:
                raise RuntimeError("unregister_current called by a non-running participant")
            live = [t for t in self._threads if t is not st]
            if live:
                self._poison_locked(f"session ended with live participants: {live}")
                self._check_poison()
            st.state = _DONE
            self._threads.remove(st)
            del self._idents[threading.get_ident()]
            self._running = None

    def session(self, name: str = "main") -> _ClockSession:
        return _ClockSession(self, name)

    def participant_count(self) -> int:
        with self._lock:
            return len(self._threads)

    # -- internals ----------------------------------------------------------

    def _current(self) -> _SimThread:
        st = self._idents.get(threading.get_ident())
        if st is None:
            raise RuntimeError("current thread is not a clock participant")
        return st

    def _check_poison(self) -> None:
        if self._dead is not None:
            raise RuntimeError(self._dead)

    def _poison_locked(self, msg: str) -> None:
        if self._dead is None:
            self._dead = "virtual clock aborted: " + msg
        for t in self._threads:
            t.event.set()

    def _thread_main(self, st: _SimThread, target: Callable[[], None]) -> None:
        self._idents[threading.get_ident()] = st
        st.event.wait()
        st.event.clear()
        try:
            if self._dead is None:
                target()
        except BaseException:
            self.failures.append(f"{st.name}:\n{traceback.format_exc()}")
        finally:
            with self._lock:
                st.state = _DONE
                if st in self._threads:
                    self._threads.remove(st)
                self._idents.pop(threading.get_ident(), None)
                if self._running is st:
                    self._running = None
                    self._schedule_locked()

    def _block_current(self, deadline: Optional[float]) -> bool:
        """Park the running thread until notified or the deadline arrives.

        Returns True when woken by a notify, False on deadline expiry.
        """
        st = self._current()
        with self._lock:
            self._check_poison()
            if self._running is not st:
                raise RuntimeError(f"{st.name} blocked without holding the run token")
            self._seq += 1
            st.block_seq = self._seq
            st.state = _BLOCKED
            st.deadline = deadline
            st.notified = False
            self._running = None
            self._schedule_locked()
        st.event.wait()
        st.event.clear()
        with self._lock:
            self._check_poison()
        return st.notified

    def _schedule_locked(self) -> None:
        while True:
            if self._ready:
                nxt = self._ready.popleft()
                nxt.state = _RUNNING
                nxt.deadline = None
                self._running = nxt
                nxt.event.set()
                return
            blocked = [t for t in self._threads if t.state == _BLOCKED]
            if not blocked:
                return  # teardown: nothing left to run
            dated = [t for t in blocked if t.deadline is not None]
            if not dated:
                self._poison_locked(
                    "deadlock, all participants waiting without deadlines: "
                    + ", ".join(map(repr, blocked))
                )
                return
            wake_at = min(t.deadline for t in dated)
            if self._limit is not None and wake_at > self._limit:
                self._poison_locked(f"virtual time limit {self._limit} exceeded")
                return
            if wake_at > self._now:
                self._now = wake_at
            due = sorted(
                (t for t in dated if t.deadline <= self._now),
                key=lambda t: t.block_seq,
            )
            for t in due:
                t.state = _READY
                t.deadline = None
                self._ready.append(t)


class _VirtualCondition:
    """threading.Condition lookalike whose timeouts follow the virtual clock."""

    def __init__(self, clock: VirtualClock) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self._waiters: list[_SimThread] = []

    def __enter__(self):
        self._lock.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._lock.release()

    def acquire(self) -> bool:
        return self._lock.acquire()

    def release(self) -> None:
        self._lock.release()

    def wait(self, timeout: Optional[float] = None) -> bool:
        clock = self._clock
        st = clock._current()
        deadline = None if timeout is None else clock.now() + max(timeout, 0.0)
        self._waiters.append(st)
        # Releasing before parking is safe: no other participant can run
        # until _block_current hands over the token.
        self._lock.release()
        try:
            notified = clock._block_current(deadline)
        finally:
            self._lock.acquire()
            if st in self._waiters:
                self._waiters.remove(st)
        return notified

    def wait_for(self, predicate: Callable[[], bool], timeout: Optional[float] = None) -> bool:
        endtime = None
        result = predicate()
        while not result:
            waittime = None
            if timeout is not None:
                if endtime is None:
                    endtime = self._clock.now() + timeout
                waittime = endtime - self._clock.now()
                if waittime <= 0:
                    return predicate()
            self.wait(waittime)
            result = predicate()
        return result

    def notify_all(self) -> None:
        clock = self._clock
        with clock._lock:
            for st in self._waiters:
                if st.state == _BLOCKED:
                    st.notified = True
                    st.state = _READY
                    st.deadline = None
                    clock._ready.append(st)
        self._waiters.clear()
