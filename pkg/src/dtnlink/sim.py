"""Deterministic discrete-event simulator with an acoustic channel model.

Time is integer milliseconds.  Every source of randomness in a run (frame
detection, send jitter, shuffles, payload ids) draws from the simulator's
single seeded generator, so a (scenario, seed) pair fully determines the
event trace.

The channel applies an independent per-receiver detection probability to
each frame and delivers survivors after transmission, propagation, and
processing delay.  Nodes beyond the detection range never receive anything.
Frames addressed to other nodes are still delivered (for snooping) with
``addressed_to_self`` false; destination 0 is broadcast.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

BROADCAST = 0


class CausalityViolation(Exception):
    """An event was scheduled in the simulated past."""


@dataclass
class ChannelParams:
    p_detection: float = 1.0
    range_m: float = 1500.0
    sound_speed_mps: float = 1500.0
    data_rate_Bps: float = 5000.0
    proc_delay_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_detection <= 1.0:
            raise ValueError("p_detection must lie in [0, 1]")
        if self.range_m <= 0:
            raise ValueError("range_m must be positive")

    def flight_time_ms(self, frame_len: int, distance_m: float) -> int:
        """Total one-way delay on the millisecond grid."""
        d_trans = frame_len / self.data_rate_Bps * 1000.0
        d_prop = distance_m / self.sound_speed_mps * 1000.0
        return round(d_trans + d_prop + self.proc_delay_ms)


class NodeTrack:
    """Piecewise-linear trajectory; a single waypoint is a static node."""

    def __init__(self, waypoints: list[tuple[int, float, float, float]]):
        if not waypoints:
            raise ValueError("at least one waypoint required")
        times = [w[0] for w in waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint instants must be strictly increasing")
        self.waypoints = [(int(t), float(x), float(y), float(z)) for t, x, y, z in waypoints]

    def position_at(self, t_ms: int) -> tuple[float, float, float]:
        wp = self.waypoints
        if t_ms <= wp[0][0]:
            return wp[0][1:]
        if t_ms >= wp[-1][0]:
            return wp[-1][1:]
        for (t0, *p0), (t1, *p1) in zip(wp, wp[1:]):
            if t0 <= t_ms <= t1:
                f = (t_ms - t0) / (t1 - t0)
                return tuple(a + f * (b - a) for a, b in zip(p0, p1))
        raise AssertionError("unreachable")


@dataclass
class _SimNode:
    address: int
    track: NodeTrack
    on_frame: Optional[Callable[[bytes, bool, int], None]] = None


@dataclass
class TraceEntry:
    t_ms: int
    kind: str  # TX or RX
    src: int
    dst: int  # receiver address on RX lines
    length: int
    frame_id: int

    def line(self) -> str:
        return f"{self.t_ms} {self.kind} {self.src} {self.dst} {self.length} {self.frame_id}"


class Simulator:
    """Virtual clock, event queue, and (optionally) the shared channel."""

    def __init__(self, seed: int = 0, channel: Optional[ChannelParams] = None, trace: bool = False):
        self.now = 0
        self.rng = random.Random(seed)
        self.seed = seed
        self.channel = channel
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._nodes: dict[int, _SimNode] = {}
        self.trace_enabled = trace
        self.trace_entries: list[TraceEntry] = []
        self._frame_seq = 0
        # Test hook: return True to silently discard a frame for one receiver.
        self.drop_filter: Optional[Callable[[int, int, bytes, int], bool]] = None

    # -- event loop ----------------------------------------------------------

    def schedule(self, at: int, action: Callable[[], None]) -> None:
        if at < self.now:
            raise CausalityViolation(f"event at {at} is before current time {self.now}")
        heapq.heappush(self._queue, (at, self._seq, action))
        self._seq += 1

    def schedule_in(self, delay_ms: int, action: Callable[[], None]) -> None:
        self.schedule(self.now + delay_ms, action)

    def run_until(self, t_end: int) -> int:
        executed = 0
        while self._queue and self._queue[0][0] <= t_end:
            at, _, action = heapq.heappop(self._queue)
            self.now = at
            action()
            executed += 1
        self.now = max(self.now, t_end)
        return executed

    # -- nodes and mobility ----------------------------------------------------

    def add_node(self, address: int, track: NodeTrack,
                 on_frame: Optional[Callable[[bytes, bool, int], None]] = None) -> None:
        if address <= 0:
            raise ValueError("node addresses are positive integers")
        if address in self._nodes:
            raise ValueError(f"node {address} already registered")
        self._nodes[address] = _SimNode(address, track, on_frame)

    def set_frame_handler(self, address: int, on_frame: Callable[[bytes, bool, int], None]) -> None:
        self._nodes[address].on_frame = on_frame

    def position_at(self, address: int, t_ms: int) -> tuple[float, float, float]:
        return self._nodes[address].track.position_at(t_ms)

    def distance(self, a: int, b: int, t_ms: int) -> float:
        return math.dist(self.position_at(a, t_ms), self.position_at(b, t_ms))

    # -- channel ---------------------------------------------------------------

    def transmit(self, src: int, dst: int, frame: bytes, now: Optional[int] = None) -> None:
        """Put a frame on the water; every in-range node rolls for detection."""
        if self.channel is None:
            raise RuntimeError("simulator was built without channel parameters")
        t = self.now if now is None else now
        self._frame_seq += 1
        frame_id = self._frame_seq
        if self.trace_enabled:
            self.trace_entries.append(TraceEntry(t, "TX", src, dst, len(frame), frame_id))
        for node in self._nodes.values():
            if node.address == src or node.on_frame is None:
                continue
            d = self.distance(src, node.address, t)
            if d > self.channel.range_m:
                continue
            if self.drop_filter is not None and self.drop_filter(src, dst, frame, node.address):
                continue
            if self.rng.random() >= self.channel.p_detection:
                continue
            arrive_at = t + self.channel.flight_time_ms(len(frame), d)
            addressed = dst == node.address or dst == BROADCAST
            self.schedule(arrive_at, self._deliver(node, frame, addressed, arrive_at, src, frame_id))

    def _deliver(self, node: _SimNode, frame: bytes, addressed: bool, at: int, src: int, frame_id: int):
        def action():
            if self.trace_enabled:
                self.trace_entries.append(TraceEntry(at, "RX", src, node.address, len(frame), frame_id))
            node.on_frame(frame, addressed, at)

        return action


def seeded_rng(seed: int) -> random.Random:
    return random.Random(seed)
