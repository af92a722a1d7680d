"""Simulated transport, the public broadcast board, and the event log.

The transport delivers sealed envelopes with seeded uniform latency and
i.i.d. drops; every send updates the sender's exact message counters.  The
board models the public bulletin channel: append-only, instantly readable
by everyone, with zero-cost notification events.
"""

import json
from dataclasses import dataclass, field

from .core import Simulator
from .messages import Envelope

__all__ = ["MessageStats", "Network", "Board", "EventLog"]


@dataclass
class MessageStats:
    sent: int = 0
    received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    dropped: int = 0


class Network:
    """Latency/drop fabric between registered nodes."""

    def __init__(self, sim: Simulator, rng, latency_min: int, latency_max: int, drop_rate: float):
        if latency_min < 0 or latency_max < latency_min:
            raise ValueError("invalid latency bounds")
        if not 0.0 <= drop_rate < 1.0:
            raise ValueError("drop rate must be in [0, 1)")
        self.sim = sim
        self.rng = rng
        self.latency_min = latency_min
        self.latency_max = latency_max
        self.drop_rate = drop_rate
        self.nodes: dict[int, object] = {}
        self.stats: dict[int, MessageStats] = {}

    def register(self, node) -> None:
        self.nodes[node.address] = node
        self.stats[node.address] = MessageStats()

    def send(self, env: Envelope, dst: int) -> None:
        sender = self.stats[env.sender]
        sender.sent += 1
        sender.bytes_sent += env.wire_size
        latency = self.rng.randint(self.latency_min, self.latency_max)
        if self.drop_rate and self.rng.random() < self.drop_rate:
            sender.dropped += 1
            return
        node = self.nodes[dst]
        receiver = self.stats[dst]

        def deliver():
            receiver.received += 1
            receiver.bytes_received += env.wire_size
            node.on_envelope(env)

        self.sim.schedule(latency, deliver)


class Board:
    """Append-only public posts, notified to subscribers in posting order."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.posts: list[dict] = []
        self._subscribers: list = []

    def subscribe(self, callback) -> None:
        self._subscribers.append(callback)

    def post(self, kind: str, payload: dict) -> dict:
        record = {"time": self.sim.now, "kind": kind, "payload": payload}
        self.posts.append(record)
        for callback in list(self._subscribers):
            self.sim.schedule(0, lambda cb=callback, rec=record: cb(rec))
        return record

    def latest(self, kind: str) -> dict | None:
        for record in reversed(self.posts):
            if record["kind"] == kind:
                return record
        return None


class EventLog:
    """Replayable JSON-lines record of a run; field order is stable."""

    def __init__(self, sim: Simulator, log_messages: bool = False):
        self.sim = sim
        self.log_messages = log_messages
        self.records: list[dict] = []

    def emit(self, actor: str, event_type: str, **payload) -> None:
        self.records.append(
            {"time": self.sim.now, "actor": actor, "type": event_type, **payload}
        )

    def emit_message(self, actor: str, event_type: str, **payload) -> None:
        if self.log_messages:
            self.emit(actor, event_type, **payload)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records
        )

    @staticmethod
    def parse_jsonl(text: str) -> list[dict]:
        records = []
        for line in text.splitlines():
            if line.strip():
                records.append(json.loads(line))
        return records
