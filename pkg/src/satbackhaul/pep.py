"""Split-connection proxy pair at the two edges of the satellite segment.

An active proxy terminates the subscriber's transport connection on the
terrestrial side, relays the byte stream over a rate-paced reliable protocol
across the satellite hop, and re-originates a normal connection on the far
terrestrial side.  End-to-end bytes are conserved; a full relay buffer pushes
back through advertised credit instead of dropping.
"""

from __future__ import annotations

from .engine import SEC, Simulator
from .network import ACK_BYTES, DATA, Packet
from .transport import MSS, HEADER_BYTES, RangeSet

PACE_FLOOR_BPS = 64_000
RATE_RECOVERY_FACTOR = 1.5
RTT_NOMINAL_US = 560_000
WINDOW_RTT_FACTOR = 1.25
FEEDBACK_BYTES = 120          # cumulative ack + ranges + credit + telemetry
RELAY_BUFFER_BYTES = 2_000_000
STALL_PROBE_US = 100_000
IDLE_RTO_US = 2 * SEC


class PacedStream:
    """Reliable rate-paced byte stream across the satellite segment.

    The sender starts directly at its configured share of the segment capacity
    (no multi-round-trip ramp) and halves the pace on loss, recovering
    multiplicatively while loss-free.  Feedback is per-packet, carries
    cumulative/selective state plus the receiver's relay-buffer credit, and is
    larger than a bare transport ack because it ships the protocol's own
    flow-control telemetry.
    """

    def __init__(self, sim: Simulator, stream_id: str, data_tx, feedback_tx,
                 pace_bps: int, deliver):
        self.sim = sim
        self.stream_id = stream_id
        self.data_tx = data_tx
        self.feedback_tx = feedback_tx
        self.pace_cap_bps = pace_bps
        self.pace_bps = pace_bps
        self.deliver = deliver
        self.window_bytes = max(int(WINDOW_RTT_FACTOR * pace_bps * RTT_NOMINAL_US / (8 * SEC)),
                                4 * MSS)

        # sender
        self.app_available = 0
        self.app_closed = False
        self.next_seq = 0
        self.cum_acked = 0
        self.segs: dict[int, list] = {}      # start -> [end, sacked]
        self.lost: list[int] = []
        self.dup_feedback = 0
        self.peer_credit = RELAY_BUFFER_BYTES
        self.pump_armed = False
        self.next_tx_at = 0
        self.loss_events = 0
        self.retransmits = 0
        self._progress_deadline = None
        self._progress_armed = False
        self._loss_free_interval = True

        # receiver
        self.rcv = RangeSet()
        self.delivered = 0
        self.known_total = -1
        self.credit_fn = None                # callable -> free downstream buffer
        self._credit_blocked = False
        self.complete_cb = None

        self.sim.schedule(self.sim.now + 500_000, self._rate_recovery_tick, None)

    # -- sender side -----------------------------------------------------------

    def push(self, nbytes: int) -> None:
        self.app_available += nbytes
        self._pump_soon()

    def close(self) -> None:
        self.app_closed = True
        self._pump_soon()

    def _pump_soon(self):
        if self.pump_armed:
            return
        self.pump_armed = True
        at = max(self.sim.now, self.next_tx_at)
        self.sim.schedule(at, self._pump, None)

    def _pump(self, _):
        self.pump_armed = False
        start = end = None
        if self.lost:
            s = self.lost[0]
            seg = self.segs.get(s)
            if seg is not None and not seg[1]:
                if s - self.cum_acked >= self.peer_credit + self.window_bytes:
                    return
                self.lost.pop(0)
                start, end = s, seg[0]
                self.retransmits += 1
            else:
                self.lost.pop(0)
                self._pump_soon()
                return
        else:
            in_flight = self.next_seq - self.cum_acked
            if (self.next_seq < self.app_available
                    and in_flight < self.window_bytes
                    and in_flight < self.peer_credit):
                start = self.next_seq
                end = min(start + MSS, self.app_available)
                self.next_seq = end
                self.segs[start] = [end, False]
        if start is None:
            return
        total = self.app_available if self.app_closed else -1
        size = (end - start) + HEADER_BYTES
        self.data_tx(Packet(DATA, size, self.sim.now, self.stream_id, None,
                            ("pseg", self.stream_id, start, end, total)))
        self.next_tx_at = self.sim.now + size * 8 * SEC // self.pace_bps
        self._arm_progress_timer()
        if self.lost or (self.next_seq < self.app_available):
            self.pump_armed = True
            self.sim.schedule(self.next_tx_at, self._pump, None)

    def on_feedback(self, payload) -> None:
        _, _, cum, ranges, credit = payload
        self.peer_credit = credit
        if cum < self.cum_acked:
            return
        progressed = cum > self.cum_acked
        if progressed:
            self.dup_feedback = 0
            self.cum_acked = cum
            acked = []
            for s in self.segs:
                if s >= cum:
                    break
                acked.append(s)
            for s in acked:
                self.segs.pop(s)
                if s in self.lost:
                    self.lost.remove(s)
            self._arm_progress_timer()
        for a, b in ranges:
            s = a
            while s < b:
                seg = self.segs.get(s)
                if seg is None:
                    break
                seg[1] = True
                if s in self.lost:
                    self.lost.remove(s)
                s = seg[0]
        if not progressed and ranges:
            self.dup_feedback += 1
            if self.dup_feedback == 3:
                self.dup_feedback = 0
                self._loss_response()
        self._pump_soon()

    def _loss_response(self):
        self.loss_events += 1
        self._loss_free_interval = False
        self.pace_bps = max(self.pace_bps // 2, PACE_FLOOR_BPS)
        high = 0
        for s, seg in self.segs.items():
            if seg[1] and seg[0] > high:
                high = seg[0]
        for s, seg in self.segs.items():
            if not seg[1] and s < high and s not in self.lost:
                self.lost.append(s)
        self.lost.sort()

    def _rate_recovery_tick(self, _):
        if self._loss_free_interval and self.pace_bps < self.pace_cap_bps:
            self.pace_bps = min(int(self.pace_bps * RATE_RECOVERY_FACTOR), self.pace_cap_bps)
        self._loss_free_interval = True
        self.sim.schedule(self.sim.now + 500_000, self._rate_recovery_tick, None)

    def _arm_progress_timer(self):
        if self.app_closed and self.cum_acked >= self.app_available:
            self._progress_deadline = None
            return
        self._progress_deadline = self.sim.now + IDLE_RTO_US
        if not self._progress_armed:
            self._progress_armed = True
            self.sim.schedule(self._progress_deadline, self._progress_fire, None)

    def _progress_fire(self, _):
        self._progress_armed = False
        if self._progress_deadline is None:
            return
        if self.sim.now < self._progress_deadline:
            self._progress_armed = True
            self.sim.schedule(self._progress_deadline, self._progress_fire, None)
            return
        if self.next_seq > self.cum_acked:
            # stalled: treat the oldest hole as lost and fall back hard
            self._loss_response()
            if self.cum_acked not in self.lost and self.cum_acked in self.segs:
                seg = self.segs[self.cum_acked]
                if not seg[1]:
                    self.lost.insert(0, self.cum_acked)
            self._arm_progress_timer()
            self._pump_soon()

    # -- receiver side -----------------------------------------------------------

    def on_data(self, payload) -> None:
        _, _, start, end, total = payload
        if total >= 0:
            self.known_total = total
        before = self.rcv.cum()
        self.rcv.add(start, end)
        cum = self.rcv.cum()
        if cum > before:
            self.delivered = cum
            self.deliver(cum - before)
        self._send_feedback()
        if (self.known_total >= 0 and cum >= self.known_total
                and self.complete_cb is not None):
            cb, self.complete_cb = self.complete_cb, None
            cb()

    def _credit(self) -> int:
        if self.credit_fn is None:
            return RELAY_BUFFER_BYTES
        return max(self.credit_fn(), 0)

    def _send_feedback(self):
        credit = self._credit()
        cum = self.rcv.cum()
        self.feedback_tx(Packet("ack", FEEDBACK_BYTES, self.sim.now, self.stream_id, None,
                                ("pfb", self.stream_id, cum, self.rcv.above_cum(), credit)))
        if credit < MSS:
            if not self._credit_blocked:
                self._credit_blocked = True
                self.sim.schedule(self.sim.now + STALL_PROBE_US, self._credit_probe, None)
        else:
            self._credit_blocked = False

    def _credit_probe(self, _):
        if not self._credit_blocked:
            return
        if self._credit() >= MSS:
            self._credit_blocked = False
            self._send_feedback()
        else:
            self.sim.schedule(self.sim.now + STALL_PROBE_US, self._credit_probe, None)


class PepSession:
    """Book-keeping for one intercepted connection relayed across the segment."""

    def __init__(self, conn_id: str):
        self.conn_id = conn_id
        self.lan_conn = None
        self.wan_conn = None
        self.sat_stream: PacedStream | None = None
        self.bytes_in = 0
        self.bytes_relayed = 0

    def buffered_bytes(self) -> int:
        return self.bytes_in - self.bytes_relayed

    def conserved(self) -> bool:
        return self.bytes_in >= self.bytes_relayed >= 0
