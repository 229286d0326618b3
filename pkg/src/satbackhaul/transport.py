"""Packet-granularity reliable transport with loss-based congestion control,
plus a constant-bitrate datagram source for voice traffic.

The control laws are the classic loss-based ones: slow start doubling per
round trip, additive increase above the threshold, halving on triple
duplicate feedback, backoff to one segment on retransmission timeout.
Recovery bookkeeping uses the receiver's out-of-order ranges so a burst of
drop-tail losses is repaired in a handful of round trips instead of one
segment per round trip.
"""

from __future__ import annotations

from .engine import SEC, Simulator
from .network import ACK_BYTES, DATA, VOIP, Packet

MSS = 1460
HEADER_BYTES = 40
INITIAL_WINDOW_MSS = 10
RTO_FLOOR_US = 1 * SEC
RTO_CAP_US = 60 * SEC
INF = float("inf")

# segment states
_OUT = 0      # sent, no feedback yet
_SACKED = 1   # reported received out of order
_LOST = 2     # marked lost, awaiting retransmission


class RangeSet:
    """Disjoint sorted byte ranges with cumulative-prefix queries."""

    def __init__(self):
        self.ranges: list[list[int]] = []

    def add(self, start: int, end: int) -> None:
        if end <= start:
            return
        rs = self.ranges
        i = 0
        while i < len(rs) and rs[i][1] < start:
            i += 1
        j = i
        while j < len(rs) and rs[j][0] <= end:
            j += 1
        if i == j:
            rs.insert(i, [start, end])
        else:
            rs[i:j] = [[min(start, rs[i][0]), max(end, rs[j - 1][1])]]

    def cum(self) -> int:
        rs = self.ranges
        if rs and rs[0][0] == 0:
            return rs[0][1]
        return 0

    def above_cum(self, limit: int = 4) -> tuple:
        rs = self.ranges
        start = 1 if rs and rs[0][0] == 0 else 0
        tail = rs[start:]
        if len(tail) > limit:
            tail = tail[-limit:]
        return tuple((a, b) for a, b in tail)

    def as_tuple(self) -> tuple:
        return tuple((a, b) for a, b in self.ranges)


class Connection:
    """One reliable byte stream between an initiator ("a") and a responder ("b").

    ``a_tx``/``b_tx`` inject packets into the network from either endpoint;
    delivered packets must be fed back through :meth:`on_packet`.  Data flows
    from ``data_side`` after a full handshake round trip.
    """

    def __init__(self, sim: Simulator, conn_id: str, a_tx, b_tx, data_side: str = "b",
                 app_bytes=None, recv_window=None, recorder=None):
        self.sim = sim
        self.conn_id = conn_id
        self.tx = {"a": a_tx, "b": b_tx}
        self.data_side = data_side
        self.ack_side = "a" if data_side == "b" else "b"
        self.recorder = recorder

        # sender state
        self.cwnd = float(INITIAL_WINDOW_MSS * MSS)
        self.ssthresh = INF
        self.next_seq = 0
        self.cum_acked = 0
        self.segs: dict[int, list] = {}   # start -> [end, state, sent_us, retransmitted]
        self.pipe = 0
        self.lost: list[int] = []         # retransmission order; stale entries skipped lazily
        self.sack_high = 0
        self._sack_done: dict[int, int] = {}
        self._pending_out = deque()       # first-transmission starts, send order
        self.dupacks = 0
        self.recovery_point = -1
        self.in_recovery = False
        self.srtt_us = None
        self.rttvar_us = 0
        self.rto_us = RTO_FLOOR_US
        self._rto_deadline = None
        self._rto_armed = False
        self.retransmits = 0
        self.spurious_acks = 0
        self.loss_events = 0

        # application stream: bytes made available to send; closed when no more follow
        if app_bytes is None:
            self.app_available = 0
            self.app_closed = False
        else:
            self.app_available = int(app_bytes)
            self.app_closed = True
        self.total_sent_done = False

        # receiver state
        self.rcv = RangeSet()
        self.known_total = -1
        self.recv_window = recv_window    # callable -> advertised window in bytes
        self.peer_window = INF

        # handshake
        self.opened_at = None
        self.a_connected_at = None
        self.b_connected_at = None
        self.sender_started = False
        self._synack_sent_at = None
        self._hs_timer_gen = 0

        # observers
        self.on_connected = None          # f(client_rtt_us)
        self.on_first_byte = None         # f(t_us)
        self.on_complete = None           # f(t_us, delivered_bytes)
        self.on_deliver = None            # f(nbytes) in-order delivery callback
        self.first_byte_at = None
        self.completed_at = None
        self.delivered_in_order = 0

    # -- application interface ------------------------------------------------

    def open(self) -> None:
        self.opened_at = self.sim.now
        self._send_ctl("a", ("syn", self.conn_id))
        self._arm_hs_timer("a", RTO_FLOOR_US)

    def push_app(self, nbytes: int) -> None:
        self.app_available += nbytes
        if self.sender_started:
            self._try_send()

    def close_app(self) -> None:
        self.app_closed = True
        if self.sender_started:
            self._try_send()
            self._maybe_send_empty()

    def stop(self) -> None:
        """Truncate an open-ended stream at whatever has been sent already."""
        self.app_available = self.next_seq
        self.app_closed = True
        if self.sender_started:
            self._emit_segment(self.next_seq, self.next_seq)

    def _maybe_send_empty(self):
        if self.app_available == 0 and self.next_seq == 0:
            self._emit_segment(0, 0)

    def _ensure_completion_marker(self, _):
        """Keep re-announcing the final length until the receiver has it.

        The length rides every closed-stream segment, but the last such
        segment can be lost; the receiver cannot declare the stream complete
        without it.
        """
        if self.completed_at is not None or not self.app_closed:
            return
        self._emit_segment(self.app_available, self.app_available)
        self.sim.schedule(self.sim.now + RTO_FLOOR_US, self._ensure_completion_marker, None)

    # -- packet plumbing --------------------------------------------------------

    def _send_ctl(self, side: str, payload) -> None:
        self.tx[side](Packet(DATA, HEADER_BYTES, self.sim.now, self.conn_id,
                             None, payload))

    def _arm_hs_timer(self, side: str, delay_us: int) -> None:
        self._hs_timer_gen += 1
        self.sim.schedule(self.sim.now + delay_us, self._hs_timeout,
                          (side, self._hs_timer_gen, delay_us))

    def _hs_timeout(self, arg):
        side, gen, delay_us = arg
        if gen != self._hs_timer_gen:
            return
        if side == "a" and self.a_connected_at is None:
            self._send_ctl("a", ("syn", self.conn_id))
            self._arm_hs_timer("a", min(delay_us * 2, RTO_CAP_US))
        elif side == "b" and not self.sender_started and self.data_side == "b":
            self._send_ctl("b", ("synack", self.conn_id))
            self._arm_hs_timer("b", min(delay_us * 2, RTO_CAP_US))

    def on_packet(self, side: str, pkt: Packet) -> None:
        payload = pkt.payload
        tag = payload[0]
        if tag == "seg":
            self._rx_data(side, payload)
        elif tag == "ack":
            self._rx_ack(side, payload)
        elif tag == "syn":
            if side == "b":
                self._synack_sent_at = self.sim.now
                self._send_ctl("b", ("synack", self.conn_id))
                self._arm_hs_timer("b", RTO_FLOOR_US)
        elif tag == "synack":
            if side == "a" and self.a_connected_at is None:
                self.a_connected_at = self.sim.now
                self._hs_timer_gen += 1
                if self.on_connected is not None:
                    self.on_connected(self.sim.now - self.opened_at)
                self._send_ctl("a", ("req", self.conn_id))
                if self.data_side == "a":
                    self._start_sender()
            elif side == "a":
                self._send_ctl("a", ("req", self.conn_id))
        elif tag == "req":
            if side == "b":
                self.b_connected_at = self.sim.now
                self._hs_timer_gen += 1
                if self._synack_sent_at is not None and self.srtt_us is None:
                    self._rtt_sample(self.sim.now - self._synack_sent_at)
                if self.data_side == "b" and not self.sender_started:
                    self._start_sender()

    # -- sender ---------------------------------------------------------------

    def _start_sender(self):
        self.sender_started = True
        if self.app_closed and self.app_available == 0:
            # empty transfer: tell the peer there is nothing to wait for
            self._emit_segment(0, 0)
            return
        self._try_send()

    def _app_limit(self):
        return self.app_available

    def _try_send(self):
        cwnd = self.cwnd
        limit = self._app_limit()
        sent_any = False
        while True:
            if self.lost:
                start = self.lost[0]
                seg = self.segs.get(start)
                if seg is None or seg[1] != _LOST:
                    self.lost.pop(0)
                    continue
                size = seg[0] - start
                if self.pipe + size > cwnd:
                    break
                self.lost.pop(0)
                seg[1] = _OUT
                seg[2] = self.sim.now
                seg[3] = True
                self.pipe += size
                self.retransmits += 1
                self._emit_segment(start, seg[0])
                sent_any = True
                continue
            if self.next_seq < limit and (self.next_seq - self.cum_acked) < self.peer_window:
                size = min(MSS, limit - self.next_seq)
                if self.pipe + size > cwnd:
                    break
                start = self.next_seq
                end = start + size
                self.next_seq = end
                self.segs[start] = [end, _OUT, self.sim.now, False]
                self.pipe += size
                self._emit_segment(start, end)
                sent_any = True
                continue
            break
        if sent_any:
            self._arm_rto()

    def _emit_segment(self, start: int, end: int):
        total = -1
        if self.app_closed:
            total = self.app_available
        size = (end - start) + HEADER_BYTES
        self.tx[self.data_side](Packet(DATA, size, self.sim.now, self.conn_id, None,
                                       ("seg", self.conn_id, start, end, total)))

    # retransmission timer: lazily re-armed to keep event volume low
    def _arm_rto(self):
        self._rto_deadline = self.sim.now + self.rto_us
        if not self._rto_armed:
            self._rto_armed = True
            self.sim.schedule(self._rto_deadline, self._rto_fire, None)

    def _rto_fire(self, _):
        self._rto_armed = False
        if self._rto_deadline is None:
            return
        if self.sim.now < self._rto_deadline:
            self._rto_armed = True
            self.sim.schedule(self._rto_deadline, self._rto_fire, None)
            return
        if self.pipe == 0 and not self.segs:
            return
        self.on_loss("timeout")

    def on_loss(self, kind: str) -> None:
        """Apply the loss response: window halving on duplicate feedback,
        collapse to one segment with exponential backoff on a timeout."""
        flight = self.next_seq - self.cum_acked
        self.loss_events += 1
        if kind == "timeout":
            self.ssthresh = max(flight / 2.0, 2.0 * MSS)
            self.cwnd = float(MSS)
            self.rto_us = min(self.rto_us * 2, RTO_CAP_US)
            for start, seg in self.segs.items():
                if seg[1] == _OUT:
                    seg[1] = _LOST
            self.lost = sorted(s for s, seg in self.segs.items() if seg[1] == _LOST)
            self.pipe = 0
            self.dupacks = 0
            self.in_recovery = True
            self.recovery_point = self.next_seq
            self._try_send()
            self._arm_rto()
        else:  # triple duplicate feedback
            self.ssthresh = max(flight / 2.0, 2.0 * MSS)
            self.cwnd = self.ssthresh
            self.in_recovery = True
            self.recovery_point = self.next_seq
            self._mark_holes()
            self._try_send()

    def _mark_holes(self):
        """Mark unsacked, never-retransmitted segments below the highest sacked
        byte as lost; a lost retransmission is only recovered by the timer."""
        high = self.sack_high
        fresh = []
        for start, seg in self.segs.items():
            if start >= high:
                break
            if seg[1] == _OUT and not seg[3]:
                seg[1] = _LOST
                self.pipe -= seg[0] - start
                fresh.append(start)
        if fresh:
            if self.lost and fresh[0] < self.lost[-1]:
                self.lost = sorted(set(self.lost) | set(fresh))
            else:
                self.lost.extend(fresh)

    def _rtt_sample(self, sample_us: int):
        if self.srtt_us is None:
            self.srtt_us = float(sample_us)
            self.rttvar_us = sample_us / 2.0
        else:
            self.rttvar_us = 0.75 * self.rttvar_us + 0.25 * abs(self.srtt_us - sample_us)
            self.srtt_us = 0.875 * self.srtt_us + 0.125 * sample_us
        self.rto_us = min(max(self.srtt_us + 4.0 * self.rttvar_us, RTO_FLOOR_US), RTO_CAP_US)

    def on_ack(self, cum: int, ranges: tuple, peer_window=INF) -> None:
        """Cumulative/selective feedback processing and congestion-window growth."""
        self.peer_window = peer_window
        if cum > self.next_seq or cum < self.cum_acked:
            self.spurious_acks += 1
            return
        newly = cum - self.cum_acked
        if newly > 0:
            self.dupacks = 0
            self.cum_acked = cum
            sample = None
            acked = []
            for start in self.segs:  # insertion order is increasing start offset
                if start >= cum:
                    break
                acked.append(start)
            for start in acked:
                seg = self.segs.pop(start)
                if seg[1] == _OUT:
                    self.pipe -= seg[0] - start
                if not seg[3]:
                    sample = self.sim.now - seg[2]
            if sample is not None:
                self._rtt_sample(sample)
            if self.in_recovery and cum >= self.recovery_point:
                self.in_recovery = False
            if not self.in_recovery:
                if self.cwnd < self.ssthresh:
                    self.cwnd += newly
                else:
                    self.cwnd += MSS * newly / self.cwnd
            if self.cum_acked >= self._app_limit() and self.app_closed:
                self._rto_deadline = None
                if not self.total_sent_done:
                    self.total_sent_done = True
                    self._ensure_completion_marker(None)
            else:
                self._arm_rto()
        # selective feedback: walk only bytes not already processed per block
        newly_sacked = False
        for a, b in ranges:
            if b > self.sack_high:
                self.sack_high = b
            done = self._sack_done.get(a, a)
            start = max(a, done)
            if start >= b:
                continue
            while start < b:
                seg = self.segs.get(start)
                if seg is None:
                    start = b  # below the cumulative point, already reaped
                    break
                if seg[1] == _OUT:
                    seg[1] = _SACKED
                    self.pipe -= seg[0] - start
                    newly_sacked = True
                elif seg[1] == _LOST:
                    seg[1] = _SACKED
                    newly_sacked = True
                start = seg[0]
            self._sack_done[a] = max(done, start)
        if newly == 0 and ranges:
            self.dupacks += 1
            if self.dupacks == 3 and not self.in_recovery:
                self.on_loss("triple-dup")
                return
            if self.in_recovery and newly_sacked:
                self._mark_holes()
        self._try_send()

    def _rx_ack(self, side: str, payload):
        if side != self.data_side:
            self.spurious_acks += 1
            return
        _, _, cum, ranges, rwnd = payload
        self.on_ack(cum, ranges, rwnd)

    # -- receiver ---------------------------------------------------------------

    def _rx_data(self, side: str, payload):
        if side != self.ack_side:
            return
        _, _, start, end, total = payload
        if total >= 0:
            self.known_total = total
        before = self.rcv.cum()
        self.rcv.add(start, end)
        cum = self.rcv.cum()
        if cum > before:
            delivered = cum - before
            self.delivered_in_order = cum
            if self.first_byte_at is None and cum > 0:
                self.first_byte_at = self.sim.now
                if self.on_first_byte is not None:
                    self.on_first_byte(self.sim.now)
            if self.on_deliver is not None:
                self.on_deliver(delivered)
        rwnd = INF if self.recv_window is None else self.recv_window()
        self.tx[self.ack_side](Packet("ack", ACK_BYTES, self.sim.now, self.conn_id, None,
                                      ("ack", self.conn_id, cum, self.rcv.above_cum(), rwnd)))
        if (self.known_total >= 0 and self.completed_at is None
                and cum >= self.known_total):
            self.completed_at = self.sim.now
            if self.on_complete is not None:
                self.on_complete(self.sim.now, cum)

    # -- introspection ------------------------------------------------------------

    def client_handshake_rtt_us(self):
        if self.a_connected_at is None or self.opened_at is None:
            return None
        return self.a_connected_at - self.opened_at

    def stream_intact(self) -> bool:
        """Receiver holds exactly the prefix [0, total) with no gaps."""
        if self.known_total < 0:
            return False
        if self.known_total == 0:
            return True
        return self.rcv.as_tuple() == ((0, self.known_total),)


class DatagramFlow:
    """Fixed-rate, fixed-size datagram stream with delay/jitter/loss accounting."""

    def __init__(self, sim: Simulator, flow_id: str, tx, rate_bps: int,
                 packet_bytes: int = 200, recorder=None, ue_id: str = ""):
        self.sim = sim
        self.flow_id = flow_id
        self.tx = tx
        self.rate_bps = rate_bps
        self.packet_bytes = packet_bytes
        self.period_us = packet_bytes * 8 * SEC // rate_bps
        self.recorder = recorder
        self.ue_id = ue_id
        self.sent = 0
        self.received = 0
        self.delay_sum_us = 0
        self.jitter_us = 0.0
        self._last_transit = None
        self.stop_at = None
        self.running = False

    def start(self, duration_us: int) -> None:
        self.running = True
        self.stop_at = self.sim.now + duration_us
        self._emit(None)

    def _emit(self, _):
        if not self.running or self.sim.now >= self.stop_at:
            self.running = False
            return
        self.sent += 1
        self.tx(Packet(VOIP, self.packet_bytes, self.sim.now, self.flow_id, None,
                       ("dg", self.flow_id, self.sent)))
        self.sim.schedule(self.sim.now + self.period_us, self._emit, None)

    def on_packet(self, pkt: Packet) -> None:
        self.received += 1
        transit = self.sim.now - pkt.created
        self.delay_sum_us += transit
        if self._last_transit is not None:
            d = abs(transit - self._last_transit)
            self.jitter_us += (d - self.jitter_us) / 16.0
        self._last_transit = transit

    # -- summary ------------------------------------------------------------------

    def mean_delay_ms(self) -> float:
        return (self.delay_sum_us / self.received) / 1000.0 if self.received else 0.0

    def jitter_ms(self) -> float:
        return self.jitter_us / 1000.0

    def loss_fraction(self) -> float:
        return 1.0 - self.received / self.sent if self.sent else 0.0

    def record_summary(self) -> None:
        if self.recorder is None:
            return
        t = self.sim.now
        self.recorder.add(self.ue_id, "voip_delay_ms", t, self.mean_delay_ms())
        self.recorder.add(self.ue_id, "voip_jitter_ms", t, self.jitter_ms())
        self.recorder.add(self.ue_id, "voip_loss_pct", t, 100.0 * self.loss_fraction())
