"""Seeded single-threaded discrete-event loop with generator processes.

Events fire in nondecreasing virtual time, ties broken by insertion order,
so a run is a pure function of its seeds.  Protocol logic is written as
generators that yield `Future` objects (a pending reply, a timer) and are
resumed with the future's value; that keeps multi-round exchanges readable
without callback chains.
"""

import hashlib
import heapq
import random
from typing import Any, Callable, Generator, Iterable

__all__ = [
    "TIMEOUT",
    "Future",
    "Simulator",
    "Process",
    "all_of",
    "derive_rng",
    "derive_seed",
]


class _Timeout:
    __slots__ = ()

    def __repr__(self):
        return "TIMEOUT"

    def __bool__(self):
        return False


TIMEOUT = _Timeout()


class Future:
    """A one-shot value that processes can wait on."""

    __slots__ = ("done", "value", "_callbacks")

    def __init__(self):
        self.done = False
        self.value: Any = None
        self._callbacks: list[Callable[["Future"], None]] = []

    def resolve(self, value: Any = None) -> bool:
        """Set the value; later resolutions (a reply after its timeout) are dropped."""
        if self.done:
            return False
        self.done = True
        self.value = value
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)
        return True

    def on_done(self, callback: Callable[["Future"], None]) -> None:
        if self.done:
            callback(self)
        else:
            self._callbacks.append(callback)


class Simulator:
    """Virtual clock and event queue; times are integer milliseconds."""

    def __init__(self):
        self.now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self.events_processed = 0

    def schedule(self, delay: int, callback: Callable[[], None]) -> None:
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, callback))

    def sleep(self, delay: int) -> Future:
        fut = Future()
        self.schedule(delay, fut.resolve)
        return fut

    def sleep_until(self, when: int) -> Future:
        return self.sleep(max(0, when - self.now))

    def run(self, until: int | None = None) -> None:
        """Drain the queue, optionally stopping once the clock passes `until`."""
        while self._heap:
            when, _, callback = self._heap[0]
            if until is not None and when > until:
                break
            heapq.heappop(self._heap)
            self.now = when
            self.events_processed += 1
            callback()


class Process:
    """Drives a generator that yields futures; itself awaitable via `.result`."""

    def __init__(self, sim: Simulator, gen: Generator[Future, Any, Any]):
        self._gen = gen
        self.result = Future()
        sim.schedule(0, lambda: self._step(None))

    def _step(self, value: Any) -> None:
        try:
            fut = self._gen.send(value)
        except StopIteration as stop:
            self.result.resolve(stop.value)
            return
        fut.on_done(lambda f: self._step(f.value))


def all_of(futures: Iterable[Future]) -> Future:
    """A future resolving with the list of values once every input resolved."""
    futures = list(futures)
    combined = Future()
    if not futures:
        combined.resolve([])
        return combined
    remaining = [len(futures)]

    def _one_done(_):
        remaining[0] -= 1
        if remaining[0] == 0:
            combined.resolve([f.value for f in futures])

    for fut in futures:
        fut.on_done(_one_done)
    return combined


def derive_seed(master: int, *labels) -> int:
    """A stable 64-bit sub-seed for an independent random stream."""
    text = ":".join([str(master), *map(str, labels)])
    return int.from_bytes(hashlib.sha3_256(text.encode()).digest()[:8], "big")


def derive_rng(master: int, *labels) -> random.Random:
    return random.Random(derive_seed(master, *labels))
