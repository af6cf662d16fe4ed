"""Deterministic virtual ranks: a bulk-synchronous stand-in for MPI.

A :class:`RankWorld` holds one state slot per rank.  :meth:`RankWorld.run_phase`
runs a step function once per rank.  Messages sent during a phase are
delivered at the start of the next one, grouped by sender in ascending order.
Every message must be received exactly once.
"""

from __future__ import annotations

import csv
import io
import pickle
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    tag: str
    payload: Any


@dataclass(frozen=True)
class TraceRecord:
    phase: int
    sender: int
    receiver: int
    tag: str
    nbytes: int


def payload_nbytes(payload) -> int:
    """Approximate wire size of a payload."""
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (bytes, bytearray)):
        return len(payload)
    if isinstance(payload, (bool, int, float, np.integer, np.floating)):
        return 8
    if isinstance(payload, dict):
        return sum(payload_nbytes(k) + payload_nbytes(v) for k, v in payload.items())
    if isinstance(payload, (list, tuple)):
        return sum(payload_nbytes(p) for p in payload)
    if hasattr(payload, "__dataclass_fields__"):
        return sum(payload_nbytes(getattr(payload, f)) for f in payload.__dataclass_fields__)
    return len(pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL))


class RankContext:
    """What one rank sees during one phase."""

    def __init__(self, rank: int, size: int, phase: int, inbox: list[Message]):
        self.rank = rank
        self.size = size
        self.phase = phase
        self._inbox = inbox
        self._consumed = [False] * len(inbox)
        self.outbox: list[Message] = []

    def send(self, receiver: int, tag: str, payload: Any = None) -> None:
        if not 0 <= receiver < self.size:
            raise RuntimeError(f"rank {self.rank} sent to nonexistent rank {receiver}")
        self.outbox.append(Message(self.rank, int(receiver), tag, payload))

    def receive(self, tag: str | None = None) -> list[Message]:
        """Take all pending messages (optionally of one tag), sender-ordered."""
        out = []
        for i, msg in enumerate(self._inbox):
            if not self._consumed[i] and (tag is None or msg.tag == tag):
                self._consumed[i] = True
                out.append(msg)
        return out

    def receive_from(self, tag: str) -> dict[int, Any]:
        """Payloads of one tag keyed by sender (at most one message per sender)."""
        out = {}
        for msg in self.receive(tag):
            if msg.sender in out:
                raise RuntimeError(f"two '{tag}' messages from rank {msg.sender}")
            out[msg.sender] = msg.payload
        return out

    def unconsumed(self) -> list[Message]:
        return [m for m, used in zip(self._inbox, self._consumed) if not used]


StepFunction = Callable[[RankContext, Any], Any]


@dataclass
class RankWorld:
    size: int
    states: list = field(default_factory=list)
    trace: list[TraceRecord] = field(default_factory=list)
    phase: int = 0
    pending: dict[int, list[Message]] = field(default_factory=dict)
    record_trace: bool = True

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("need at least one rank")
        if not self.states:
            self.states = [None] * self.size
        if len(self.states) != self.size:
            raise ValueError("one state slot per rank")

    def run_phase(self, step: StepFunction, order: str = "ascending") -> "RankWorld":
        """Run ``step(ctx, state) -> new_state`` on every rank.

        The returned state replaces the rank's slot.  Messages queued with
        ``ctx.send`` become the next phase's inboxes.
        """
        ranks: Iterable[int] = range(self.size)
        if order == "descending":
            ranks = reversed(range(self.size))
        elif order != "ascending":
            raise ValueError(f"unknown order {order!r}")
        inboxes = self.pending
        contexts = {}
        new_states = list(self.states)
        for rank in ranks:
            ctx = RankContext(rank, self.size, self.phase, inboxes.get(rank, []))
            new_states[rank] = step(ctx, self.states[rank])
            left = ctx.unconsumed()
            if left:
                raise RuntimeError(f"rank {rank} left {len(left)} message(s) unread "
                                   f"in phase {self.phase}")
            contexts[rank] = ctx
        delivered: dict[int, list[Message]] = {}
        for rank in range(self.size):
            for msg in contexts[rank].outbox:
                delivered.setdefault(msg.receiver, []).append(msg)
                if self.record_trace:
                    self.trace.append(TraceRecord(self.phase, msg.sender, msg.receiver,
                                                  msg.tag, payload_nbytes(msg.payload)))
        for msgs in delivered.values():
            msgs.sort(key=lambda m: m.sender)  # stable: keeps per-sender order
        self.states = new_states
        self.pending = delivered
        self.phase += 1
        return self

    def flush(self) -> None:
        if any(self.pending.values()):
            raise RuntimeError("undelivered messages remain")
        self.pending = {}

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["phase", "sender", "receiver", "tag", "bytes"])
        for rec in self.trace:
            writer.writerow([rec.phase, rec.sender, rec.receiver, rec.tag, rec.nbytes])
        return buf.getvalue()


def exchange(world: RankWorld, outgoing: Callable[[int, Any], dict[int, Any]],
             tag: str, incoming: Callable[[int, Any, dict[int, Any]], Any],
             order: str = "ascending") -> RankWorld:
    """Two-phase point-to-point exchange.

    ``outgoing(rank, state)`` returns ``{receiver: payload}``; afterwards
    ``incoming(rank, state, {sender: payload})`` returns the new state.
    """

    def send_step(ctx, state):
        for receiver, payload in sorted(outgoing(ctx.rank, state).items()):
            ctx.send(receiver, tag, payload)
        return state

    def recv_step(ctx, state):
        return incoming(ctx.rank, state, ctx.receive_from(tag))

    world.run_phase(send_step, order)
    world.run_phase(recv_step, order)
    return world


def allgather(world: RankWorld, values: list, tag: str = "allgather") -> list[list]:
    """Every rank contributes ``values[rank]`` and learns the full list."""
    if len(values) != world.size:
        raise ValueError("one value per rank")
    gathered = [None] * world.size

    def send_step(ctx, state):
        for q in range(ctx.size):
            ctx.send(q, tag, values[ctx.rank])
        return state

    def recv_step(ctx, state):
        got = ctx.receive_from(tag)
        gathered[ctx.rank] = [got[q] for q in range(ctx.size)]
        return state

    world.run_phase(send_step)
    world.run_phase(recv_step)
    return gathered


def all_reduce_and(world: RankWorld, flags: list[bool]) -> bool:
    """Logical and of one flag per rank, delivered to every rank."""
    seen = allgather(world, [bool(f) for f in flags], tag="allreduce_and")
    results = [all(row) for row in seen]
    assert len(set(results)) == 1
    return results[0]
