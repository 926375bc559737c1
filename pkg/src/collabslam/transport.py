"""Sequenced delivery over lossy channels: NACK-driven resend with a bounded window.

Each direction of a (client, session) link carries its own sequence space
starting at 1.  The receiver delivers strictly in order, buffers early
frames, and asks for gaps with NACK_RESEND.  Acknowledgement is cumulative
("highest contiguous seq") and rides on any reverse-direction frame; a
standalone ACK is emitted when the link goes idle.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from . import protocol as P
from .errors import WindowOverrun

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 256


@dataclass
class LinkStats:
    frames_sent: int = 0
    bytes_sent: int = 0
    retransmits: int = 0
    retransmit_bytes: int = 0
    nacks_sent: int = 0
    duplicates: int = 0
    delivered: list = field(default_factory=list)  # seq history in delivery order


class ReliableSender:
    def __init__(self, window: int = DEFAULT_WINDOW):
        self.window = window
        self.next_seq = 1
        self.acked = 0
        self.pending: OrderedDict[int, bytes] = OrderedDict()
        self.evicted_upto = 0  # every seq <= this left the window without an ack

    def stamp(self, m: P.WireMessage) -> bytes:
        m.seq = self.next_seq
        self.next_seq += 1
        frame = P.encode(m)
        self.pending[m.seq] = frame
        while len(self.pending) > self.window:
            s, _ = self.pending.popitem(last=False)
            self.evicted_upto = max(self.evicted_upto, s)
        return frame

    def on_ack(self, upto: int) -> None:
        if upto <= self.acked:
            return
        self.acked = upto
        while self.pending and next(iter(self.pending)) <= upto:
            self.pending.popitem(last=False)

    def resend(self, seqs) -> list[bytes]:
        out = []
        for s in seqs:
            if s <= self.acked:
                continue
            frame = self.pending.get(s)
            if frame is None:
                if s < self.next_seq:
                    raise WindowOverrun(f"seq {s} no longer in the resend window")
                continue
            out.append(frame)
        return out

    def unacked(self) -> list[bytes]:
        return list(self.pending.values())


class ReliableReceiver:
    def __init__(self, window: int = DEFAULT_WINDOW):
        self.window = window
        self.expected = 1
        self.early: dict[int, P.WireMessage] = {}
        self.nacked: set[int] = set()
        self.ack_owed = False

    @property
    def contiguous(self) -> int:
        return self.expected - 1

    def accept(self, m: P.WireMessage) -> tuple[list[P.WireMessage], list[int], bool]:
        """Returns (in-order deliveries, newly missing seqs to NACK, was_duplicate)."""
        s = m.seq
        self.ack_owed = True
        if s < self.expected or s in self.early:
            return [], [], True
        if s - self.expected >= self.window:
            raise WindowOverrun(f"gap {self.expected}..{s - 1} exceeds window {self.window}")
        self.early[s] = m
        out = []
        while self.expected in self.early:
            out.append(self.early.pop(self.expected))
            self.nacked.discard(self.expected)
            self.expected += 1
        missing = []
        if self.early:
            for q in range(self.expected, max(self.early)):
                if q not in self.early and q not in self.nacked:
                    missing.append(q)
            self.nacked.update(missing)
        return out, missing, False

    def gaps(self) -> list[int]:
        if not self.early:
            return []
        return [q for q in range(self.expected, max(self.early)) if q not in self.early]


class Endpoint:
    """One side of a (client, session) link: stamps outgoing frames, orders incoming ones."""

    def __init__(self, client_id: int, session_id: int, window: int = DEFAULT_WINDOW):
        self.client_id = client_id
        self.session_id = session_id
        self.sender = ReliableSender(window)
        self.receiver = ReliableReceiver(window)
        self.stats = LinkStats()
        self._idle_rounds = 0
        self._last_acked = 0

    def _control(self, msg_type: P.MsgType, control=None) -> bytes:
        m = P.WireMessage(msg_type, self.client_id, self.session_id, control=control, ack=self.receiver.contiguous)
        self.receiver.ack_owed = False
        return P.encode(m)

    def send(self, m: P.WireMessage) -> bytes:
        m.client_id, m.session_id = self.client_id, self.session_id
        if self.receiver.contiguous > 0:
            m.ack = self.receiver.contiguous
            self.receiver.ack_owed = False
        frame = self.sender.stamp(m)
        self.stats.frames_sent += 1
        self.stats.bytes_sent += len(frame)
        return frame

    def receive(self, m: P.WireMessage) -> tuple[list[P.WireMessage], list[bytes]]:
        """Feed one decoded frame; returns (deliverable messages, frames to send back)."""
        replies: list[bytes] = []
        if m.ack is not None:
            self.sender.on_ack(m.ack)
        if m.msg_type == P.MsgType.ACK:
            return [], replies
        if m.msg_type == P.MsgType.NACK_RESEND:
            frames = self.sender.resend(m.control.seqs)
            self.stats.retransmits += len(frames)
            self.stats.retransmit_bytes += sum(len(f) for f in frames)
            return [], frames
        out, missing, dup = self.receiver.accept(m)
        if dup:
            self.stats.duplicates += 1
        if missing:
            replies.append(self._control(P.MsgType.NACK_RESEND, P.Nack(missing)))
            self.stats.nacks_sent += 1
        self.stats.delivered.extend(x.seq for x in out)
        return out, replies

    def idle(self) -> list[bytes]:
        """Called when the link is quiet: owed ACK, re-NACK of gaps, retransmission of unacked tail."""
        out = []
        gaps = self.receiver.gaps()
        if gaps:
            out.append(self._control(P.MsgType.NACK_RESEND, P.Nack(gaps[: P.U16_MAX])))
            self.stats.nacks_sent += 1
        elif self.receiver.ack_owed:
            out.append(self._control(P.MsgType.ACK))
        if self.sender.pending:
            if self.sender.acked == self._last_acked:
                self._idle_rounds += 1
            else:
                self._idle_rounds = 0
            self._last_acked = self.sender.acked
            # the peer cannot NACK a lost tail; resend it once a full quiet
            # round (time for the peer's ACK to arrive) brought no progress
            if self._idle_rounds >= 2:
                frames = self.sender.unacked()
                self.stats.retransmits += len(frames)
                self.stats.retransmit_bytes += sum(len(f) for f in frames)
                out.extend(frames)
        else:
            self._idle_rounds = 0
        return out

    def settled(self) -> bool:
        return not self.sender.pending and not self.receiver.early and not self.receiver.ack_owed
