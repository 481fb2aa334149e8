"""Deterministic discrete-event engine.

Simulated time is an integer count of nanoseconds. Events are ordered by
``(fire_at, seq)`` where ``seq`` is a global insertion counter, so two runs
with the same configuration and seed process exactly the same sequence.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, TextIO

from apesim.errors import ScheduleError

NS = 1
US = 1_000
MS = 1_000_000
S = 1_000_000_000


@dataclass(slots=True)
class Event:
    fire_at: int
    seq: int
    target: str
    kind: str
    data: Any = None
    handler: Optional[Callable[["Event"], None]] = field(default=None, repr=False)


def derive_seed(seed: int, stream_id: str) -> int:
    """Stable 64-bit seed for a named consumer of a master seed."""
    digest = hashlib.sha256(f"{seed}:{stream_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngStreams:
    """Named random streams derived from one master seed.

    Adding a new consumer never perturbs the draws of the existing ones.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, stream_id: str) -> random.Random:
        rng = self._streams.get(stream_id)
        if rng is None:
            rng = random.Random(derive_seed(self.seed, stream_id))
            self._streams[stream_id] = rng
        return rng


class Engine:
    """Single-threaded event loop with a virtual nanosecond clock."""

    def __init__(self, seed: int = 0, trace: Optional[TextIO] = None):
        self._now = 0
        self._seq = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._targets: dict[str, Callable[[Event], None]] = {}
        self._stopped = False
        self.rng = RngStreams(seed)
        self.trace = trace
        self._digest = hashlib.sha256()
        self.scheduled = 0
        self.processed = 0

    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return len(self._queue)

    def register(self, target: str, handler: Callable[[Event], None]) -> None:
        """Route events addressed to ``target`` without their own handler."""
        self._targets[target] = handler

    def schedule(self, fire_at: int, handler=None, *, target: str = "", kind: str = "",
                 data: Any = None) -> int:
        if fire_at < self._now:
            raise ScheduleError(
                f"event {kind or '?'} for {target or '?'} scheduled at {fire_at} ns, "
                f"before now = {self._now} ns")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, seq, Event(fire_at, seq, target, kind, data, handler)))
        self.scheduled += 1
        return seq

    def after(self, delay: int, handler=None, **kwargs) -> int:
        return self.schedule(self._now + delay, handler, **kwargs)

    def stop(self) -> None:
        """Make the current ``run``/``run_until`` call return after this event."""
        self._stopped = True

    def _dispatch(self, ev: Event) -> None:
        self._now = ev.fire_at
        self.processed += 1
        if self.trace is not None:
            line = f"{ev.fire_at}\t{ev.seq}\t{ev.target}\t{ev.kind}\n"
            self.trace.write(line)
            self._digest.update(line.encode())
        handler = ev.handler or self._targets.get(ev.target)
        if handler is not None:
            handler(ev)

    def run_until(self, t: int) -> int:
        """Process every event with ``fire_at <= t``; leaves the clock at ``t``."""
        if t < self._now:
            raise ScheduleError(f"run_until({t}) is before now = {self._now} ns")
        count = 0
        queue = self._queue
        self._stopped = False
        while queue and queue[0][0] <= t:
            self._dispatch(heapq.heappop(queue)[2])
            count += 1
            if self._stopped:
                return count
        self._now = t
        return count

    def run(self, max_events: Optional[int] = None) -> int:
        """Drain the queue (or stop after ``max_events``)."""
        count = 0
        queue = self._queue
        self._stopped = False
        while queue:
            self._dispatch(heapq.heappop(queue)[2])
            count += 1
            if self._stopped or (max_events is not None and count >= max_events):
                break
        return count

    def trace_digest(self) -> str:
        """SHA-256 of the trace lines written so far (needs ``trace``)."""
        return self._digest.hexdigest()
