"""Deterministic event engine: integer-microsecond clock, FIFO tie-break, named RNG streams."""

from __future__ import annotations

import hashlib
import heapq
import random

# Clock units (integer microseconds).
US = 1
MS = 1_000
SEC = 1_000_000


def seconds(t_us: int) -> float:
    return t_us / SEC


class SimulationError(Exception):
    """Raised for programming errors that must abort a run (e.g. scheduling in the past)."""


class Event:
    """Cancellable handle around a scheduled callback."""

    __slots__ = ("fire_at", "fn", "arg", "cancelled")

    def __init__(self, fire_at, fn, arg):
        self.fire_at = fire_at
        self.fn = fn
        self.arg = arg
        self.cancelled = False


def stream_seed(seed: int, stream_id: str) -> int:
    """Stable 64-bit seed for a named stream; identical across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{stream_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Simulator:
    """Single-threaded event loop over a non-decreasing integer-microsecond clock.

    Events firing at the same instant execute in insertion order.  Randomness
    is only available through named streams so that adding one traffic source
    never perturbs the draws seen by another.
    """

    def __init__(self, seed: int = 0):
        self.now = 0
        self.seed = seed
        self._heap = []
        self._seq = 0
        self._streams: dict[str, random.Random] = {}
        self.trace = None  # set to a list to record (time, entity, kind) tuples

    # -- scheduling ---------------------------------------------------------

    def schedule(self, at_us: int, fn, arg=None) -> None:
        """Fast path: schedule fn(arg) at an absolute time, no cancellation handle."""
        if at_us < self.now:
            raise SimulationError(f"schedule at {at_us} us before current time {self.now} us")
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, fn, arg))

    def schedule_in(self, delay_us: int, fn, arg=None) -> None:
        self.schedule(self.now + delay_us, fn, arg)

    def schedule_event(self, at_us: int, fn, arg=None) -> Event:
        """Schedule with a handle that permits cancellation."""
        if at_us < self.now:
            raise SimulationError(f"schedule at {at_us} us before current time {self.now} us")
        ev = Event(at_us, fn, arg)
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, self._fire_event, ev))
        return ev

    @staticmethod
    def _fire_event(ev: Event):
        if not ev.cancelled:
            ev.fn(ev.arg)

    def cancel(self, ev: Event) -> None:
        ev.cancelled = True

    # -- execution ----------------------------------------------------------

    def run_until(self, t_end_us: int) -> int:
        """Execute every event with fire_at <= t_end_us; return the final clock value."""
        heap = self._heap
        while heap and heap[0][0] <= t_end_us:
            at, _, fn, arg = heapq.heappop(heap)
            self.now = at
            fn(arg)
        if heap:
            self.now = t_end_us
        return self.now

    def run(self) -> int:
        """Drain the queue completely."""
        heap = self._heap
        while heap:
            at, _, fn, arg = heapq.heappop(heap)
            self.now = at
            fn(arg)
        return self.now

    def pending(self) -> int:
        return len(self._heap)

    # -- randomness ---------------------------------------------------------

    def rng(self, stream_id: str) -> random.Random:
        """Named RNG stream; (seed, stream_id) fully determines the draw sequence."""
        r = self._streams.get(stream_id)
        if r is None:
            r = random.Random(stream_seed(self.seed, stream_id))
            self._streams[stream_id] = r
        return r

    # -- tracing ------------------------------------------------------------

    def trace_point(self, entity: str, kind: str) -> None:
        if self.trace is not None:
            self.trace.append((self.now, entity, kind))
