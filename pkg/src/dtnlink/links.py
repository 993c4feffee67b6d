"""Link abstraction: wire framing, neighbor tracking, and stop-and-wait ARQ.

Frames on the simulated wire are

    [src: 4 BE][dst: 4 BE][kind: 1][seq: 2 BE][payload]

where a DATA frame's payload is a 1-octet protocol tag followed by the
datagram bytes, and ACK/BEACON frames carry no payload.  The protocol tag is
what lets a receiver tell an encapsulated DTN PDU from a short-circuited
datagram.

A ReliableLink accepts one datagram at a time per link: it transmits, waits
for the matching ACK, and retransmits on timeout until ``max_retries`` extra
attempts are spent.  Every accepted send eventually reports exactly one
DELIVERED or FAILED outcome.  The receiver acknowledges and delivers every
DATA frame it detects; duplicate suppression is the upper layer's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .sim import BROADCAST, Simulator

FRAME_HEADER_LEN = 11

KIND_DATA = 1
KIND_ACK = 2
KIND_BEACON = 3


class LinkError(Exception):
    pass


class DuplicateLink(LinkError):
    pass


class MtuExceeded(LinkError):
    pass


class Direction(Enum):
    TX = "tx"
    RX = "rx"


@dataclass
class LinkDescriptor:
    link_id: str
    mtu: int
    data_rate: float
    reliable: bool = True
    last_tx_at: int = 0
    last_rx_at: int = 0


@dataclass
class NeighborRecord:
    node: int
    link_id: str
    last_heard_at: int


@dataclass(frozen=True)
class LinkSendOutcome:
    delivered: bool
    ref: Any


@dataclass(frozen=True)
class Frame:
    src: int
    dst: int
    kind: int
    seq: int
    protocol: Optional[int]
    payload: bytes


def build_data_frame(src: int, dst: int, seq: int, protocol: int, data: bytes) -> bytes:
    return _header(src, dst, KIND_DATA, seq) + bytes([protocol]) + data


def build_ack_frame(src: int, dst: int, seq: int) -> bytes:
    return _header(src, dst, KIND_ACK, seq)


def build_beacon_frame(src: int) -> bytes:
    return _header(src, BROADCAST, KIND_BEACON, 0)


def _header(src: int, dst: int, kind: int, seq: int) -> bytes:
    return src.to_bytes(4, "big") + dst.to_bytes(4, "big") + bytes([kind]) + seq.to_bytes(2, "big")


def parse_frame(buf: bytes) -> Frame:
    if len(buf) < FRAME_HEADER_LEN:
        raise LinkError(f"{len(buf)}-octet frame below the {FRAME_HEADER_LEN}-octet header")
    src = int.from_bytes(buf[0:4], "big")
    dst = int.from_bytes(buf[4:8], "big")
    kind = buf[8]
    seq = int.from_bytes(buf[9:11], "big")
    if kind == KIND_DATA:
        if len(buf) < FRAME_HEADER_LEN + 1:
            raise LinkError("DATA frame is missing its protocol tag")
        return Frame(src, dst, kind, seq, buf[11], bytes(buf[12:]))
    return Frame(src, dst, kind, seq, None, b"")


class LinkManager:
    """Roster of reliable links plus last-heard bookkeeping per neighbor."""

    def __init__(self):
        self._links: dict[str, LinkDescriptor] = {}
        self._priority: list[str] = []
        self._neighbors: dict[tuple[int, str], NeighborRecord] = {}

    def register_link(self, descriptor: LinkDescriptor) -> bool:
        if descriptor.link_id in self._links:
            raise DuplicateLink(descriptor.link_id)
        if not descriptor.reliable:
            return False
        self._links[descriptor.link_id] = descriptor
        self._priority.append(descriptor.link_id)
        return True

    def descriptor(self, link_id: str) -> LinkDescriptor:
        return self._links[link_id]

    def roster(self) -> list[str]:
        return list(self._priority)

    def note_activity(self, node: int, link_id: str, now: int, direction: Direction) -> None:
        if link_id not in self._links:
            raise LinkError(f"unregistered link {link_id}")
        if direction is Direction.TX:
            self.note_tx(link_id, now)
            return
        desc = self._links[link_id]
        desc.last_rx_at = max(desc.last_rx_at, now)
        rec = self._neighbors.get((node, link_id))
        if rec is None:
            self._neighbors[(node, link_id)] = NeighborRecord(node, link_id, now)
        else:
            rec.last_heard_at = max(rec.last_heard_at, now)

    def note_tx(self, link_id: str, now: int) -> None:
        desc = self._links[link_id]
        desc.last_tx_at = max(desc.last_tx_at, now)

    def active_links_for(self, node: int, now: int, link_expiry_s: float) -> list[str]:
        """Links over which ``node`` was heard recently, best-priority first."""
        horizon = link_expiry_s * 1000
        active = []
        for link_id in self._priority:
            rec = self._neighbors.get((node, link_id))
            if rec is not None and now - rec.last_heard_at < horizon:
                active.append(link_id)
        return active

    def set_link_priority(self, order: list[str]) -> bool:
        """Reorder links; an empty, unknown, or null entry voids the request."""
        if not order:
            return False
        if any(link_id is None or link_id not in self._links for link_id in order):
            return False
        if len(set(order)) != len(order):
            return False
        rest = [l for l in self._priority if l not in order]
        self._priority = list(order) + rest
        return True

    def known_neighbors(self) -> list[int]:
        seen = []
        for node, _ in self._neighbors:
            if node not in seen:
                seen.append(node)
        return seen


@dataclass
class _SendJob:
    dst: int
    protocol: int
    data: bytes
    token: Any
    on_outcome: Optional[Callable[[LinkSendOutcome, int], None]]
    seq: int = 0
    attempts: int = 0


class ReliableLink:
    """One stop-and-wait ARQ endpoint attached to the simulated channel."""

    def __init__(self, sim: Simulator, link_id: str, address: int, mtu: int,
                 data_rate: float, max_retries: int = 3,
                 range_m: Optional[float] = None, sound_speed_mps: Optional[float] = None):
        self.sim = sim
        self.link_id = link_id
        self.address = address
        self.mtu = mtu
        self.data_rate = data_rate
        self.max_retries = max_retries
        ch = sim.channel
        self._range_m = range_m if range_m is not None else (ch.range_m if ch else 1500.0)
        self._speed = sound_speed_mps if sound_speed_mps is not None else (ch.sound_speed_mps if ch else 1500.0)
        self._queue: list[_SendJob] = []
        self._current: Optional[_SendJob] = None
        self._seq = 0
        self._epoch = 0
        # Upward wiring, set by the node stack.
        self.on_payload: Optional[Callable[[int, int, bytes, bool, int], None]] = None
        self.on_control: Optional[Callable[[int, int], None]] = None
        self.on_tx: Optional[Callable[[int], None]] = None

    def descriptor(self) -> LinkDescriptor:
        return LinkDescriptor(self.link_id, self.mtu, self.data_rate, reliable=True)

    @property
    def busy(self) -> bool:
        return self._current is not None

    def send(self, dst: int, protocol: int, data: bytes, now: int, token: Any = None,
             on_outcome: Optional[Callable[[LinkSendOutcome, int], None]] = None) -> None:
        if len(data) > self.mtu:
            raise MtuExceeded(f"{len(data)} octets over MTU {self.mtu}")
        if dst == self.address:
            raise ValueError("cannot send to self")
        self._queue.append(_SendJob(dst, protocol, bytes(data), token, on_outcome))
        if self._current is None:
            self._start_next(now)

    def send_beacon(self, now: int) -> None:
        self._transmit(build_beacon_frame(self.address), now)

    # -- internals -------------------------------------------------------------

    def _start_next(self, now: int) -> None:
        self._current = self._queue.pop(0)
        self._seq = (self._seq + 1) % 65536
        self._current.seq = self._seq
        self._attempt(now)

    def _attempt(self, now: int) -> None:
        job = self._current
        job.attempts += 1
        frame = build_data_frame(self.address, job.dst, job.seq, job.protocol, job.data)
        self._transmit(frame, now)
        epoch = self._epoch
        self.sim.schedule(now + self._timeout_ms(len(frame)), lambda: self._on_timeout(epoch))

    def _timeout_ms(self, frame_len: int) -> int:
        # Frame flight plus a round trip at maximum range, plus a fixed margin.
        return round(frame_len / self.data_rate * 1000 + 2 * self._range_m / self._speed * 1000) + 100

    def _on_timeout(self, epoch: int) -> None:
        if epoch != self._epoch or self._current is None:
            return
        if self._current.attempts <= self.max_retries:
            self._attempt(self.sim.now)
        else:
            self._complete(False, self.sim.now)

    def _transmit(self, frame: bytes, now: int) -> None:
        self.sim.transmit(self.address, parse_frame(frame).dst, frame, now)
        if self.on_tx is not None:
            self.on_tx(now)

    def _complete(self, delivered: bool, now: int) -> None:
        job = self._current
        self._current = None
        self._epoch += 1
        if job.on_outcome is not None:
            job.on_outcome(LinkSendOutcome(delivered, job.token), now)
        if self._current is None and self._queue:
            self._start_next(now)

    # -- frame input -------------------------------------------------------------

    def handle_frame(self, frame: Frame, addressed_to_self: bool, now: int) -> None:
        if frame.kind == KIND_DATA:
            if addressed_to_self:
                self._transmit(build_ack_frame(self.address, frame.src, frame.seq), now)
            if self.on_payload is not None:
                self.on_payload(frame.src, frame.protocol, frame.payload, addressed_to_self, now)
        elif frame.kind == KIND_ACK:
            if self.on_control is not None:
                self.on_control(frame.src, now)
            if (addressed_to_self and self._current is not None
                    and frame.src == self._current.dst and frame.seq == self._current.seq):
                self._complete(True, now)
        elif frame.kind == KIND_BEACON:
            if self.on_control is not None:
                self.on_control(frame.src, now)

    def on_wire_frame(self, raw: bytes, addressed_to_self: bool, now: int) -> None:
        """Adapter suitable for ``Simulator.add_node``'s frame callback."""
        self.handle_frame(parse_frame(raw), addressed_to_self, now)
