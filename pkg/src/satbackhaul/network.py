"""Links, queues, shaping and static routing for the backhaul chain."""

from __future__ import annotations

from collections import deque

from .engine import SEC, Simulator, SimulationError

MTU = 1500
ACK_BYTES = 40
PROBE_BYTES = 64

# Packet kinds.
DATA = "data"
ACK = "ack"
PROBE = "probe"        # network-layer probe, never intercepted
TPROBE = "tprobe"      # transport-layer probe, intercepted by an active proxy
VOIP = "voip"
CTL = "ctl"            # proxy/session control


class Packet:
    __slots__ = ("pid", "kind", "size", "created", "flow", "dst", "payload")

    _next_id = 0

    def __init__(self, kind, size, created, flow, dst, payload=None):
        Packet._next_id += 1
        self.pid = Packet._next_id
        self.kind = kind
        self.size = size
        self.created = created
        self.flow = flow
        self.dst = dst
        self.payload = payload

    def __repr__(self):
        return f"Packet({self.kind}, {self.size}B, flow={self.flow}, dst={self.dst})"


class Counters:
    """Per-stage packet accounting used by the conservation invariant."""

    __slots__ = ("offered", "dropped", "delivered", "inside")

    def __init__(self):
        self.offered = 0
        self.dropped = 0
        self.delivered = 0
        self.inside = 0

    def conserved(self) -> bool:
        return self.offered == self.dropped + self.delivered + self.inside


class DelayPipe:
    """Uncongested segment modeled as a pure fixed delay (LTE access, core network).

    Serialization on these segments is orders of magnitude below the satellite
    bottlenecks, so it is folded into the fixed delay to keep FIFO order exact.
    """

    def __init__(self, sim: Simulator, name: str, delay_us: int, sink):
        self.sim = sim
        self.name = name
        self.delay_us = delay_us
        self.sink = sink
        self.counters = Counters()

    def send(self, pkt: Packet) -> bool:
        c = self.counters
        c.offered += 1
        c.inside += 1
        self.sim.schedule(self.sim.now + self.delay_us, self._deliver, pkt)
        return True

    def _deliver(self, pkt):
        c = self.counters
        c.inside -= 1
        c.delivered += 1
        self.sink(pkt)


class Link:
    """Rate-limited pipe with one-way propagation delay and a drop-tail byte queue.

    Service is FIFO and non-preemptive; a rate change (demand-assigned grants)
    takes effect at the next departure.  With ``voip_reserved`` set, voice
    packets ride a reserved bearer: they bypass the data queue and only incur
    their own serialization plus propagation.
    """

    def __init__(self, sim: Simulator, name: str, rate_bps: int, delay_us: int,
                 queue_bytes: int, sink, voip_reserved: bool = False):
        if rate_bps <= 0:
            raise SimulationError(f"link {name}: rate must be positive")
        self.sim = sim
        self.name = name
        self.rate_bps = rate_bps
        self.delay_us = delay_us
        self.queue_bytes = queue_bytes
        self.sink = sink
        self.voip_reserved = voip_reserved
        self.q = deque()
        self.q_occupancy = 0
        self.busy = False
        self.counters = Counters()
        self.drops = 0

    def set_rate(self, rate_bps: int) -> None:
        self.rate_bps = rate_bps
        if not self.busy and self.q and rate_bps > 0:
            self._start_next()

    def tx_us(self, size: int) -> int:
        return (size * 8 * SEC + self.rate_bps - 1) // self.rate_bps

    def send(self, pkt: Packet) -> bool:
        c = self.counters
        c.offered += 1
        if self.voip_reserved and pkt.kind == VOIP:
            c.inside += 1
            self.sim.schedule(self.sim.now + self.tx_us(pkt.size) + self.delay_us,
                              self._deliver, pkt)
            return True
        if self.q_occupancy + pkt.size > self.queue_bytes:
            c.dropped += 1
            self.drops += 1
            return False
        c.inside += 1
        self.q.append(pkt)
        self.q_occupancy += pkt.size
        if not self.busy and self.rate_bps > 0:
            self._start_next()
        return True

    def _start_next(self):
        self.busy = True
        pkt = self.q[0]
        self.sim.schedule(self.sim.now + self.tx_us(pkt.size), self._tx_done, None)

    def _tx_done(self, _):
        pkt = self.q.popleft()
        self.q_occupancy -= pkt.size
        self.busy = False
        self.sim.schedule(self.sim.now + self.delay_us, self._deliver, pkt)
        if self.q and self.rate_bps > 0:
            self._start_next()

    def _deliver(self, pkt):
        c = self.counters
        c.inside -= 1
        c.delivered += 1
        self.sink(pkt)


class TokenBucketShaper:
    """Token-bucket rate shaper with a finite FIFO waiting room.

    Departure rate is bounded by ``rate_bps`` in the long run and by
    ``burst_bytes`` instantaneously.  Packets that find the waiting room full
    are dropped, which is the loss signal congestion control reacts to on a
    per-subscriber bottleneck.
    """

    def __init__(self, sim: Simulator, name: str, rate_bps: int, burst_bytes: int,
                 queue_bytes: int, sink):
        if burst_bytes < MTU:
            raise SimulationError(f"shaper {name}: burst must cover one MTU")
        self.sim = sim
        self.name = name
        self.rate_bps = rate_bps
        self.burst_bytes = burst_bytes
        self.queue_bytes = queue_bytes
        self.sink = sink
        self.tokens = float(burst_bytes)
        self.stamp = 0
        self.q = deque()
        self.q_occupancy = 0
        self.release_pending = False
        self.counters = Counters()
        self.drops = 0

    def _refill(self):
        now = self.sim.now
        if now > self.stamp:
            self.tokens = min(float(self.burst_bytes),
                              self.tokens + (now - self.stamp) * self.rate_bps / (8 * SEC))
            self.stamp = now

    def send(self, pkt: Packet) -> bool:
        c = self.counters
        c.offered += 1
        if pkt.kind == VOIP:
            # Reserved bearer: capacity for voice is provisioned outside the data SLA.
            c.inside += 1
            self._deliver(pkt)
            return True
        self._refill()
        if not self.q and self.tokens >= pkt.size:
            self.tokens -= pkt.size
            c.inside += 1
            self._deliver(pkt)
            return True
        if self.q_occupancy + pkt.size > self.queue_bytes:
            c.dropped += 1
            self.drops += 1
            return False
        c.inside += 1
        self.q.append(pkt)
        self.q_occupancy += pkt.size
        self._arm_release()
        return True

    def _arm_release(self):
        if self.release_pending or not self.q:
            return
        deficit = self.q[0].size - self.tokens
        wait_us = 0 if deficit <= 0 else int(deficit * 8 * SEC / self.rate_bps) + 1
        self.release_pending = True
        self.sim.schedule(self.sim.now + wait_us, self._release, None)

    def _release(self, _):
        self.release_pending = False
        self._refill()
        while self.q and self.tokens >= self.q[0].size:
            pkt = self.q.popleft()
            self.q_occupancy -= pkt.size
            self.tokens -= pkt.size
            self._deliver(pkt)
        self._arm_release()

    def _deliver(self, pkt):
        c = self.counters
        c.inside -= 1
        c.delivered += 1
        self.sink(pkt)


class Topology:
    """Static routes along the backhaul chain server - gw - st - enb - ue."""

    def __init__(self, n_ues: int, pep_enabled: bool = False):
        self.n_ues = n_ues
        self.pep_enabled = pep_enabled
        self.nodes = ["server", "gw", "st", "enb"] + [f"ue{i}" for i in range(1, n_ues + 1)]

    def route(self, at: str, dst: str, kind: str = DATA) -> str:
        """Next hop for a packet at node ``at`` heading to ``dst``."""
        if dst not in self.nodes and dst not in ("pep_gw", "pep_st"):
            raise SimulationError(f"route: unknown destination {dst!r}")
        if at == dst:
            return at
        if dst.startswith("ue"):
            down = {"server": "gw", "gw": "st", "st": "enb", "enb": dst}
            if at not in down:
                raise SimulationError(f"route: no downstream hop at {at!r}")
            return down[at]
        # upstream toward the server (or a proxy standing in for it)
        if at == self.pep_st_node() and kind == TPROBE and self.pep_enabled:
            return "pep_st"
        up = {"enb": "st", "st": "gw", "gw": "server"}
        if at.startswith("ue"):
            return "enb"
        if at not in up:
            raise SimulationError(f"route: no upstream hop at {at!r}")
        return up[at]

    @staticmethod
    def pep_st_node() -> str:
        return "st"

    def path(self, src: str, dst: str, kind: str = DATA) -> list[str]:
        hops = [src]
        at = src
        for _ in range(len(self.nodes) + 2):
            nxt = self.route(at, dst, kind)
            hops.append(nxt)
            if nxt == dst or nxt in ("pep_st", "pep_gw"):
                return hops
            at = nxt
        raise SimulationError(f"route: no path {src} -> {dst}")
