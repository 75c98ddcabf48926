"""Simulated exchange of graph deltas between robots.

Delivery is at-least-once: a lost message is resent after
``retry_interval``; a lost acknowledgement delivers the message and resends it
anyway, so receivers see duplicates. :func:`slamsim.graph.apply_delta` is
idempotent, which makes duplicates harmless.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import FRAME_SWITCH, digest

TRACE_COLUMNS = ("emit_time", "deliver_time", "origin", "receiver", "seq", "kind", "n_factors")


class BusNotDrained(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GraphDelta:
    origin: int
    seq: int
    nodes: tuple = ()  # ((NodeId, initial estimate), ...)
    factors: tuple = ()
    emit_time: float = 0.0

    @property
    def kind(self):
        if not self.factors:
            return "node"
        kinds = sorted({f.kind for f in self.factors}, key=lambda k: (k == FRAME_SWITCH, k))
        return kinds[0]


@dataclass
class _Message:
    delta: GraphDelta
    due: float


@dataclass
class MessageBus:
    participants: tuple
    latency: float = 0.0
    pair_latency: dict = field(default_factory=dict)  # {(sender, receiver): seconds}
    drop_prob: float = 0.0
    retry_interval: float = 1.0
    jitter: float = 0.0
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")
        if self.drop_prob > 0 and self.retry_interval <= 0:
            raise ValueError("retransmission needs a positive retry_interval")
        if (self.drop_prob > 0 or self.jitter > 0) and self.rng is None:
            raise ValueError("a seeded rng is required for drops or jitter")
        self.participants = tuple(self.participants)
        self._queues = {(s, r): deque() for s in self.participants for r in self.participants if s != r}
        self._next_seq = {}
        self.trace = []
        self.n_sent = 0

    def latency_for(self, sender, receiver):
        return self.pair_latency.get((sender, receiver), self.latency)

    def next_seq(self, origin):
        seq = self._next_seq.get(origin, 0)
        self._next_seq[origin] = seq + 1
        return seq

    @property
    def in_flight(self):
        return sum(len(q) for q in self._queues.values())

    def broadcast(self, delta: GraphDelta):
        for r in self.participants:
            if r == delta.origin:
                continue
            q = self._queues[(delta.origin, r)]
            due = delta.emit_time + self.latency_for(delta.origin, r)
            if self.jitter > 0:
                due += self.rng.uniform(0.0, self.jitter)
            if q:
                due = max(due, q[-1].due)  # keeps per-pair FIFO under jitter
            q.append(_Message(delta, due))
            self.n_sent += 1

    def step_deliveries(self, now: float):
        """Release every due message, pairs in sorted order, FIFO within a pair."""
        out = []
        for (sender, receiver) in sorted(self._queues):
            q = self._queues[(sender, receiver)]
            while q and q[0].due <= now:
                msg = q[0]
                if self.drop_prob > 0:
                    lost = self.rng.random() < self.drop_prob
                    ack_lost = self.rng.random() < self.drop_prob
                    if lost:
                        msg.due = now + self.retry_interval
                        break
                    self._record(msg, now, receiver)
                    out.append((receiver, msg.delta))
                    if ack_lost:
                        msg.due = now + self.retry_interval
                        break
                else:
                    self._record(msg, now, receiver)
                    out.append((receiver, msg.delta))
                q.popleft()
        return out

    def next_due(self):
        dues = [q[0].due for q in self._queues.values() if q]
        return min(dues) if dues else None

    def _record(self, msg, now, receiver):
        d = msg.delta
        self.trace.append((d.emit_time, now, d.origin, receiver, d.seq, d.kind, len(d.factors)))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        w.writerows(self.trace)
        return buf.getvalue()


@dataclass
class ConsistencyReport:
    consistent: bool
    digests: dict


def check_consistency(graphs: dict, bus: MessageBus | None = None) -> ConsistencyReport:
    """Compare structural digests of every robot's graph replica."""
    if bus is not None and bus.in_flight:
        raise BusNotDrained("bus not drained")
    digests = {rid: digest(g) for rid, g in sorted(graphs.items())}
    return ConsistencyReport(len(set(digests.values())) <= 1, digests)
