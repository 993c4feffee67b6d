"""Link manager and stop-and-wait ARQ tests."""

import pytest

from dtnlink.links import (
    Direction,
    DuplicateLink,
    LinkDescriptor,
    LinkManager,
    MtuExceeded,
    ReliableLink,
    build_ack_frame,
    build_beacon_frame,
    build_data_frame,
    parse_frame,
)
from dtnlink.sim import ChannelParams, NodeTrack, Simulator


def desc(link_id, reliable=True, mtu=1600):
    return LinkDescriptor(link_id=link_id, mtu=mtu, data_rate=5000, reliable=reliable)


class TestFrameCodec:
    def test_data_roundtrip(self):
        raw = build_data_frame(src=1, dst=2, seq=300, protocol=63, data=b"hello")
        f = parse_frame(raw)
        assert (f.src, f.dst, f.kind, f.seq, f.protocol, f.payload) == (1, 2, 1, 300, 63, b"hello")

    def test_ack_and_beacon(self):
        ack = parse_frame(build_ack_frame(src=2, dst=1, seq=300))
        assert (ack.kind, ack.seq, ack.payload) == (2, 300, b"")
        bc = parse_frame(build_beacon_frame(src=5))
        assert (bc.kind, bc.dst) == (3, 0)


class TestLinkManager:
    def test_register_reliable(self):
        mgr = LinkManager()
        assert mgr.register_link(desc("A")) is True
        assert mgr.roster() == ["A"]

    def test_reject_unreliable(self):
        mgr = LinkManager()
        assert mgr.register_link(desc("A", reliable=False)) is False
        assert mgr.roster() == []

    def test_duplicate_rejected(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        with pytest.raises(DuplicateLink):
            mgr.register_link(desc("A"))

    def test_neighbor_monotone(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.note_activity(3, "A", 50, Direction.RX)
        mgr.note_activity(3, "A", 40, Direction.RX)  # late frame, clock stays
        assert mgr.active_links_for(3, 50, link_expiry_s=1) == ["A"]
        assert mgr._neighbors[(3, "A")].last_heard_at == 50

    def test_tx_resets_idle_clock(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.note_activity(0, "A", 1234, Direction.TX)
        assert mgr.descriptor("A").last_tx_at == 1234

    def test_active_links_boundary(self):
        # Heard at t=0 with a 1000 s expiry: active at 999 s, gone at 1000 s.
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.note_activity(2, "A", 0, Direction.RX)
        assert mgr.active_links_for(2, 999_000, link_expiry_s=1000) == ["A"]
        assert mgr.active_links_for(2, 1_000_000, link_expiry_s=1000) == []

    def test_priority_ordering(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.register_link(desc("B"))
        mgr.note_activity(4, "A", 10, Direction.RX)
        mgr.note_activity(4, "B", 10, Direction.RX)
        assert mgr.active_links_for(4, 20, 100) == ["A", "B"]
        assert mgr.set_link_priority(["B", "A"]) is True
        assert mgr.active_links_for(4, 20, 100) == ["B", "A"]

    def test_priority_request_ignored_on_unknown_id(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.register_link(desc("B"))
        assert mgr.set_link_priority(["B", "C"]) is False
        assert mgr.set_link_priority([]) is False
        assert mgr.set_link_priority([None, "A"]) is False
        assert mgr.roster() == ["A", "B"]

    def test_never_returns_unheard_link(self):
        mgr = LinkManager()
        mgr.register_link(desc("A"))
        mgr.register_link(desc("B"))
        mgr.note_activity(4, "B", 10, Direction.RX)
        assert mgr.active_links_for(4, 20, 100) == ["B"]


class LinkPair:
    """Two ARQ endpoints over a shared channel."""

    def __init__(self, p=1.0, distance=1500.0, range_m=1500.0, seed=0, mtu=1600):
        self.sim = Simulator(seed=seed, channel=ChannelParams(p_detection=p, range_m=range_m))
        self.sim.add_node(1, NodeTrack([(0, 0.0, 0.0, 0.0)]))
        self.sim.add_node(2, NodeTrack([(0, distance, 0.0, 0.0)]))
        self.a = ReliableLink(self.sim, "A", address=1, mtu=mtu, data_rate=5000)
        self.b = ReliableLink(self.sim, "B", address=2, mtu=mtu, data_rate=5000)
        self.sim.set_frame_handler(1, self.a.on_wire_frame)
        self.sim.set_frame_handler(2, self.b.on_wire_frame)
        self.outcomes = []
        self.rx = []
        self.b.on_payload = lambda src, proto, data, mine, now: self.rx.append((src, proto, data, mine))

    def send(self, data=b"payload", token=None):
        self.a.send(2, 63, data, self.sim.now, token=token,
                    on_outcome=lambda o, t: self.outcomes.append((o, t)))


class TestReliableSend:
    def test_lossless_delivers_first_attempt(self):
        pair = LinkPair(p=1.0)
        pair.send(token="m1")
        pair.sim.run_until(60_000)
        assert len(pair.outcomes) == 1
        outcome, _ = pair.outcomes[0]
        assert outcome.delivered is True and outcome.ref == "m1"
        assert [r[2] for r in pair.rx] == [b"payload"]

    def test_dead_channel_fails_after_four_attempts(self):
        pair = LinkPair(p=0.0)
        pair.sim.trace_enabled = True
        pair.send()
        pair.sim.run_until(600_000)
        assert len(pair.outcomes) == 1
        assert pair.outcomes[0][0].delivered is False
        data_tx = [e for e in pair.sim.trace_entries if e.kind == "TX" and e.src == 1]
        assert len(data_tx) == 4  # initial attempt + maxRetries retransmissions

    def test_mtu_refused_synchronously(self):
        pair = LinkPair(mtu=32)
        with pytest.raises(MtuExceeded):
            pair.a.send(2, 0, bytes(33), 0)

    def test_exactly_one_outcome_each(self):
        pair = LinkPair(p=0.6, seed=11)
        for i in range(50):
            pair.send(token=i)
        pair.sim.run_until(10_000_000)
        assert sorted(o.ref for o, _ in pair.outcomes) == list(range(50))

    def test_stop_and_wait_one_frame_outstanding(self):
        pair = LinkPair(p=0.0)
        pair.sim.trace_enabled = True
        for i in range(3):
            pair.send(token=i)
        pair.sim.run_until(10_000_000)
        # Transmissions of different jobs never interleave: frame times are ordered.
        tx_times = [(e.t_ms, e.frame_id) for e in pair.sim.trace_entries if e.kind == "TX" and e.src == 1]
        assert len(tx_times) == 12  # 3 jobs x 4 attempts
        assert [t for t, _ in tx_times] == sorted(t for t, _ in tx_times)

    def test_lost_ack_causes_duplicate_delivery_but_success(self):
        pair = LinkPair(p=1.0)
        dropped = set()

        def drop_first_ack(src, dst, frame, receiver):
            f = parse_frame(frame)
            if f.kind == 2 and (f.src, f.seq) not in dropped:
                dropped.add((f.src, f.seq))
                return True
            return False

        pair.sim.drop_filter = drop_first_ack
        pair.send()
        pair.sim.run_until(60_000)
        assert pair.outcomes[0][0].delivered is True
        # the receiver saw the retransmission too: upper layer must dedup
        assert [r[2] for r in pair.rx] == [b"payload", b"payload"]

    def test_empirical_delivery_rate_sample(self):
        # Closed form: per attempt both frame and ACK must survive (p^2);
        # four attempts give 1 - (1 - p^2)^4 = 0.684 at p = 0.5.
        pair = LinkPair(p=0.5, seed=21, distance=100.0, range_m=100.0)
        for i in range(2000):
            pair.send(token=i)
        pair.sim.run_until(10_000_000_000)
        rate = sum(1 for o, _ in pair.outcomes if o.delivered) / 2000
        assert abs(rate - 0.684) < 0.03
