"""Deterministic discrete-event core: virtual clock, event queue, seeded RNG streams.

Time is kept as integer microseconds internally so event ordering never
depends on float rounding; public APIs report milliseconds.
"""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

US_PER_MS = 1000

# Event kinds
MESSAGE_ARRIVAL = "message-arrival"
BLOCK_PRODUCTION = "block-production"
CONTROL_CYCLE_TICK = "control-cycle-tick"
NODE_CHURN = "node-churn"
CONTROLLER_FAILURE = "controller-failure"


class ScheduleError(Exception):
    """An event was scheduled in the past (protocol logic bug)."""


class EventBudgetExceeded(Exception):
    """The run processed more events than allowed (runaway loop guard)."""


def ms_to_us(ms: float) -> int:
    return round(ms * US_PER_MS)


def us_to_ms(us: int) -> float:
    return us / US_PER_MS


@dataclass(slots=True)
class SimEvent:
    id: int
    fire_at_us: int
    kind: str
    target: Any = None
    data: Any = None

    @property
    def fire_at_ms(self) -> float:
        return us_to_ms(self.fire_at_us)


@dataclass(slots=True)
class RunSummary:
    events: int
    end_ms: float


def derive_seed(master_seed: int, label: str) -> int:
    """Stable 64-bit seed for (master_seed, label), independent of call order."""
    digest = hashlib.blake2s(f"{master_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class RngStreams:
    """Named random streams derived from one master seed.

    Each label owns an independent generator, so adding draws to one
    subsystem never perturbs another subsystem's sequence under the
    same master seed.
    """

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, label: str) -> random.Random:
        rng = self._streams.get(label)
        if rng is None:
            rng = random.Random(derive_seed(self.master_seed, label))
            self._streams[label] = rng
        return rng

    def fixed_uniform(self, label: str, lo: float, hi: float) -> float:
        """One-shot draw keyed purely by the label (order independent)."""
        return random.Random(derive_seed(self.master_seed, label)).uniform(lo, hi)


class EventLoop:
    """Priority-queue event loop with (fire_at, id) total ordering.

    Ties at equal fire time are broken by insertion id, which makes runs
    reproducible byte for byte under a fixed seed.
    """

    def __init__(self, event_budget: int = 20_000_000, record_trace: bool = False):
        self.now_us: int = 0
        self.event_budget = event_budget
        self.processed = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._next_id = 1
        self._handlers: dict[str, Callable[[SimEvent], None]] = {}
        self.trace: Optional[list[tuple[int, int, str]]] = [] if record_trace else None

    @property
    def now_ms(self) -> float:
        return us_to_ms(self.now_us)

    def register(self, kind: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def schedule_event(self, event: SimEvent) -> int:
        if event.fire_at_us < self.now_us:
            raise ScheduleError(
                f"event {event.kind!r} scheduled at {us_to_ms(event.fire_at_us)}ms "
                f"before clock {self.now_ms}ms"
            )
        heapq.heappush(self._heap, (event.fire_at_us, event.id, event))
        return event.id

    def schedule(self, fire_at_us: int, kind: str, target: Any = None, data: Any = None) -> int:
        event = SimEvent(self._next_id, fire_at_us, kind, target, data)
        self._next_id += 1
        return self.schedule_event(event)

    def schedule_in(self, delay_us: int, kind: str, target: Any = None, data: Any = None) -> int:
        return self.schedule(self.now_us + delay_us, kind, target, data)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until_ms: Optional[float] = None) -> RunSummary:
        """Process events in (fire_at, id) order.

        With ``until_ms`` the clock stops there and later events stay queued;
        otherwise runs to quiescence. Raises EventBudgetExceeded past the
        configured budget.
        """
        until_us = None if until_ms is None else ms_to_us(until_ms)
        heap = self._heap
        handlers = self._handlers
        trace = self.trace
        processed_start = self.processed
        while heap:
            fire_us, eid, event = heap[0]
            if until_us is not None and fire_us > until_us:
                break
            heapq.heappop(heap)
            self.now_us = fire_us
            self.processed += 1
            if self.processed > self.event_budget:
                raise EventBudgetExceeded(
                    f"aborted after {self.processed} events at t={self.now_ms}ms "
                    f"(budget {self.event_budget}); likely a runaway broadcast loop"
                )
            if trace is not None:
                trace.append((fire_us, eid, event.kind))
            handler = handlers.get(event.kind)
            if handler is not None:
                handler(event)
        if until_us is not None and until_us > self.now_us:
            self.now_us = until_us
        return RunSummary(events=self.processed - processed_start, end_ms=self.now_ms)
