"""Deterministic discrete-event kernel.

Simulated time is a float in milliseconds. Events pop in ``(fire_at, seq)``
order where ``seq`` is a per-kernel insertion counter, so simultaneous events
fire in the order they were scheduled.
"""

from __future__ import annotations

import enum
import heapq
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np


class EventKind(enum.Enum):
    LOCATION_CHANGED = "LocationChanged"
    TUPLE_ARRIVAL = "TupleArrival"
    TUPLE_EXECUTED = "TupleExecuted"
    TRANSFER_COMPLETE = "TransferComplete"
    CLUSTERING_TRIGGER = "ClusteringTrigger"
    MIGRATION_STEP = "MigrationStep"
    LOOP_PROBE = "LoopProbe"


@dataclass
class Event:
    fire_at: float
    target: Any
    kind: EventKind
    payload: Any = None
    seq: int = -1  # assigned by Kernel.schedule

    def sort_key(self):
        return (self.fire_at, self.seq)


class SchedulingError(ValueError):
    """Raised when an event is scheduled before the current clock."""


class DispatchError(RuntimeError):
    """Raised when a handler fails; carries the offending event."""

    def __init__(self, event: Event, cause: BaseException):
        self.event = event
        self.cause = cause
        super().__init__(
            f"handler for {event.kind.value} event seq={event.seq} at t={event.fire_at} ms "
            f"(target={event.target!r}) raised {type(cause).__name__}: {cause}"
        )


def rng_stream(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one concern, stable across runs and platforms."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(stream.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


class Kernel:
    """Event queue, clock, entity registry and seeded RNG streams."""

    def __init__(self, seed: int = 0, record_trace: bool = False, check_order: bool = False):
        self.seed = int(seed)
        self.now = 0.0
        self._queue: List[tuple] = []
        self._seq = 0
        self._handlers: Dict[Any, Callable[[Event], None]] = {}
        self._rngs: Dict[str, np.random.Generator] = {}
        self._observers: List[Callable[[Event], None]] = []
        self.dispatched = 0
        self.record_trace = record_trace
        self.trace: List[tuple] = []
        self.check_order = check_order
        self._last_key = (-math.inf, -1)

    # -- registry -----------------------------------------------------------
    def register(self, entity_id, handler: Callable[[Event], None]) -> None:
        if entity_id in self._handlers:
            raise ValueError(f"entity {entity_id!r} already registered")
        self._handlers[entity_id] = handler

    def observe(self, fn: Callable[[Event], None]) -> None:
        """Call ``fn`` after every dispatched event."""
        self._observers.append(fn)

    def rng(self, stream: str) -> np.random.Generator:
        gen = self._rngs.get(stream)
        if gen is None:
            gen = self._rngs[stream] = rng_stream(self.seed, stream)
        return gen

    # -- scheduling ---------------------------------------------------------
    def schedule(self, event: Event) -> Event:
        if not math.isfinite(event.fire_at):
            raise SchedulingError(f"{event.kind.value} event has non-finite fire time {event.fire_at}")
        if event.fire_at < self.now:
            raise SchedulingError(
                f"cannot schedule {event.kind.value} event at t={event.fire_at} ms; clock is at {self.now} ms"
            )
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (event.fire_at, event.seq, event))
        return event

    def at(self, fire_at: float, target, kind: EventKind, payload=None) -> Event:
        return self.schedule(Event(fire_at, target, kind, payload))

    def after(self, delay: float, target, kind: EventKind, payload=None) -> Event:
        return self.schedule(Event(self.now + delay, target, kind, payload))

    @property
    def pending(self) -> int:
        return len(self._queue)

    @property
    def scheduled(self) -> int:
        return self._seq

    def peek(self) -> Optional[Event]:
        return self._queue[0][2] if self._queue else None

    # -- running ------------------------------------------------------------
    def run_until(self, t_end: float) -> float:
        if not t_end > 0:
            raise ValueError(f"t_end must be positive, got {t_end}")
        q = self._queue
        handlers = self._handlers
        observers = self._observers
        while q and q[0][0] <= t_end:
            fire_at, seq, ev = heapq.heappop(q)
            if self.check_order:
                key = (fire_at, seq)
                assert key > self._last_key, f"causality violation: {key} after {self._last_key}"
                self._last_key = key
            self.now = fire_at
            if self.record_trace:
                self.trace.append((fire_at, seq, ev.kind.value, ev.target))
            handler = handlers.get(ev.target)
            if handler is None:
                raise DispatchError(ev, KeyError(f"no handler registered for {ev.target!r}"))
            try:
                handler(ev)
            except DispatchError:
                raise
            except Exception as exc:
                raise DispatchError(ev, exc) from exc
            self.dispatched += 1
            for fn in observers:
                fn(ev)
        self.now = max(self.now, t_end)
        return self.now
