"""Timestamp-based synchronisation of event streams.

ApproximateTime emits sets holding exactly one event per scope with a small
timestamp span; TimeFrame attaches to every primary event the secondary
events inside a window around it. Producers call push(), serialised by a
lock; the registered callbacks run on the pushing thread after the lock is
released, so a callback may push into the same synchronizer.
"""

import itertools
import json
import threading
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Union

from errors import InvalidInputError, SyncOrderError
from log import logger

NS_PER_SECOND = 1_000_000_000


@dataclass(frozen=True)
class TimedEvent:
    scope: str
    timestamp: float  # seconds, monotonic clock
    payload: bytes = b""


@dataclass
class SyncSet:
    events: Dict[str, Union[TimedEvent, List[TimedEvent]]]
    pivot_timestamp: float

    @property
    def span(self) -> float:
        stamps = [
            e.timestamp
            for value in self.events.values()
            for e in (value if isinstance(value, list) else [value])
        ]
        return max(stamps) - min(stamps)


class _Synchronizer:
    def __init__(self, scopes: Sequence[str]):
        self.scopes = list(scopes)
        self._queues: Dict[str, deque] = {scope: deque() for scope in self.scopes}
        self._last_stamp: Dict[str, float] = {}
        self._callbacks: List[Callable[[SyncSet], None]] = []
        self._lock = threading.Lock()
        self._flushed = False

    def register_callback(self, callback: Callable[[SyncSet], None]):
        self._callbacks.append(callback)

    def push(self, event: TimedEvent) -> List[SyncSet]:
        """Queue an event and return the sets it completes."""
        with self._lock:
            if event.scope not in self._queues:
                raise InvalidInputError(f"unknown scope {event.scope!r}")
            last = self._last_stamp.get(event.scope)
            if last is not None and event.timestamp < last:
                raise SyncOrderError(
                    f"scope {event.scope!r}: timestamp {event.timestamp} after {last}"
                )
            self._last_stamp[event.scope] = event.timestamp
            self._queues[event.scope].append(event)
            emitted = self._collect()
        return self._notify(emitted)

    def flush(self) -> List[SyncSet]:
        """Mark every stream finished and emit what can still be formed."""
        with self._lock:
            self._flushed = True
            emitted = self._collect()
        return self._notify(emitted)

    def _collect(self) -> List[SyncSet]:
        emitted = []
        while True:
            sync_set = self._next_set()
            if sync_set is None:
                return emitted
            emitted.append(sync_set)

    def _notify(self, emitted: List[SyncSet]) -> List[SyncSet]:
        # Runs without the lock
        callbacks = list(self._callbacks)
        for sync_set in emitted:
            for callback in callbacks:
                callback(sync_set)
        return emitted

    def _next_set(self) -> Optional[SyncSet]:
        raise NotImplementedError


class ApproximateTimeSynchronizer(_Synchronizer):
    """One event per scope per set, never reusing an event.

    The pivot is the latest of the queue heads; its scope contributes that
    head and every other scope contributes the event that, together with the
    others, minimises the set's span. Only the last event at or before the
    pivot and the first one after it can be optimal, so a scope is decided
    once it holds an event past the pivot (or the streams are flushed).
    """

    def __init__(self, scopes: Sequence[str]):
        if len(scopes) < 2:
            raise InvalidInputError("ApproximateTime needs at least two scopes")
        super().__init__(scopes)

    def expire(self, now: float, timeout: float) -> List[SyncSet]:
        """Drop heads older than now - timeout while some scope is starved."""
        dropped = 0
        with self._lock:
            if not all(self._queues.values()):
                for queue in self._queues.values():
                    while queue and queue[0].timestamp < now - timeout:
                        queue.popleft()
                        dropped += 1
            if dropped:
                logger.debug(f"ApproximateTime dropped {dropped} stale events")
            emitted = self._collect()
        return self._notify(emitted)

    def _next_set(self) -> Optional[SyncSet]:
        if not all(self._queues.values()):
            return None

        pivot_scope = max(self.scopes, key=lambda s: self._queues[s][0].timestamp)
        pivot = self._queues[pivot_scope][0]

        options = {}
        for scope in self.scopes:
            if scope == pivot_scope:
                continue
            queue = self._queues[scope]
            stamps = [e.timestamp for e in queue]
            after = bisect_right(stamps, pivot.timestamp)
            if after == len(stamps) and not self._flushed:
                return None
            candidates = []
            if after > 0:
                candidates.append(after - 1)
            if after < len(stamps):
                candidates.append(after)
            options[scope] = candidates

        others = [s for s in self.scopes if s != pivot_scope]
        best_choice, best_span = None, None
        for choice in itertools.product(*(options[s] for s in others)):
            stamps = [pivot.timestamp] + [
                self._queues[s][i].timestamp for s, i in zip(others, choice)
            ]
            span = max(stamps) - min(stamps)
            if best_span is None or span < best_span:
                best_choice, best_span = choice, span

        events = {pivot_scope: self._queues[pivot_scope].popleft()}
        for scope, index in zip(others, best_choice):
            queue = self._queues[scope]
            for _ in range(index):
                queue.popleft()
            events[scope] = queue.popleft()
        return SyncSet({s: events[s] for s in self.scopes}, pivot.timestamp)


class TimeFrameSynchronizer(_Synchronizer):
    """Attach to each primary event every secondary event in
    [t - window_before, t + window_after]; secondaries may be shared."""

    def __init__(
        self,
        primary: str,
        secondaries: Sequence[str],
        window_before: float,
        window_after: float,
    ):
        if window_before < 0 or window_after < 0:
            raise InvalidInputError("time frame windows must be >= 0")
        super().__init__([primary] + list(secondaries))
        self.primary = primary
        self.secondaries = list(secondaries)
        self.window_before = window_before
        self.window_after = window_after
        self._deadline = float("-inf")

    def expire(self, now: float, timeout: float) -> List[SyncSet]:
        """Emit primaries whose window closed before now - timeout, even if
        a secondary stream has stalled."""
        with self._lock:
            self._deadline = max(self._deadline, now - timeout)
            emitted = self._collect()
        return self._notify(emitted)

    def _next_set(self) -> Optional[SyncSet]:
        primaries = self._queues[self.primary]
        if not primaries:
            return None
        head = primaries[0]
        lo = head.timestamp - self.window_before
        hi = head.timestamp + self.window_after

        if not self._flushed and hi >= self._deadline:
            # Wait until every secondary stream has moved past the window
            for scope in self.secondaries:
                last = self._last_stamp.get(scope)
                if last is None or last <= hi:
                    return None

        events = {self.primary: primaries.popleft()}
        for scope in self.secondaries:
            queue = self._queues[scope]
            stamps = [e.timestamp for e in queue]
            start, stop = bisect_left(stamps, lo), bisect_right(stamps, hi)
            events[scope] = list(itertools.islice(queue, start, stop))

            # Events before the next primary's window can never be attached again
            horizon = (primaries[0].timestamp if primaries else head.timestamp) - self.window_before
            while queue and queue[0].timestamp < horizon:
                queue.popleft()
        return SyncSet(events, head.timestamp)


def _merged(streams: Mapping[str, Iterable[TimedEvent]]) -> List[TimedEvent]:
    """All events in timestamp order, ties in scope order."""
    order = {scope: i for i, scope in enumerate(streams)}
    events = [e for queue in streams.values() for e in queue]
    return sorted(events, key=lambda e: (e.timestamp, order[e.scope]))


def approximate_time(streams: Mapping[str, Iterable[TimedEvent]]) -> Iterator[SyncSet]:
    """Synchronise finite per-scope queues with the ApproximateTime policy."""
    streams = {scope: list(queue) for scope, queue in streams.items()}
    sync = ApproximateTimeSynchronizer(list(streams))
    for event in _merged(streams):
        yield from sync.push(event)
    yield from sync.flush()


def time_frame(
    primary: Iterable[TimedEvent],
    secondaries: Mapping[str, Iterable[TimedEvent]],
    window_before: float,
    window_after: float,
) -> Iterator[SyncSet]:
    """Synchronise finite queues with the TimeFrame policy."""
    primary = list(primary)
    secondaries = {scope: list(queue) for scope, queue in secondaries.items()}
    primary_scope = primary[0].scope if primary else "primary"
    sync = TimeFrameSynchronizer(primary_scope, list(secondaries), window_before, window_after)
    streams = {primary_scope: primary, **secondaries}
    for event in _merged(streams):
        yield from sync.push(event)
    yield from sync.flush()


def write_replay(events: Iterable[TimedEvent], path):
    """Write events as JSON lines (scope, timestamp_ns, payload_hex)"""
    with open(path, "w") as f:
        for e in events:
            record = {
                "scope": e.scope,
                "timestamp_ns": int(round(e.timestamp * NS_PER_SECOND)),
                "payload_hex": e.payload.hex(),
            }
            f.write(json.dumps(record) + "\n")


def read_replay(path) -> List[TimedEvent]:
    """Read events written by write_replay, in file order"""
    events = []
    with open(path, "r") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            events.append(
                TimedEvent(
                    scope=record["scope"],
                    timestamp=record["timestamp_ns"] / NS_PER_SECOND,
                    payload=bytes.fromhex(record["payload_hex"]),
                )
            )
    return events
