"""Wires one scenario into a runnable simulation: topology, access loop,
transport endpoints, optional proxy pair, workloads, probes and measurement."""

from __future__ import annotations

from .engine import SEC, Simulator, SimulationError
from .dama import DamaController, ReturnTerminal, TerminalAccessState
from .metrics import ProbeSource, Recorder, ThroughputCollector
from .network import (ACK, DATA, PROBE, TPROBE, VOIP, DelayPipe, Link, Packet,
                      TokenBucketShaper, Topology)
from .pep import RELAY_BUFFER_BYTES, PacedStream, PepSession
from .transport import Connection, DatagramFlow
from .workloads import WorkloadRunner

SHAPER_BURST_BYTES = 15_000


class FlowRecord:
    """Per-transfer bookkeeping common to proxied and direct paths."""

    __slots__ = ("key", "ue_id", "direction", "client_conn", "end_conn",
                 "origin_conn", "session", "nbytes")

    def __init__(self, key, ue_id, direction, client_conn, end_conn, origin_conn,
                 session=None, nbytes=None):
        self.key = key
        self.ue_id = ue_id
        self.direction = direction
        self.client_conn = client_conn
        self.end_conn = end_conn
        self.origin_conn = origin_conn
        self.session = session
        self.nbytes = nbytes


class Simulation:
    """One seeded run of a scenario; produces a Recorder full of samples."""

    def __init__(self, spec, seed: int, trace: bool = False):
        self.spec = spec
        self.seed = seed
        pep_label = "on" if spec.pep else "off"
        run_id = f"{spec.scenario_id}-c{spec.cra_bps // 1000}-r{spec.rbdc_max_bps // 1000}-{pep_label}-s{seed}"
        self.recorder = Recorder(run_id, spec.scenario_id, spec.cra_bps // 1000,
                                 spec.rbdc_max_bps // 1000, spec.pep, seed)
        self.sim = Simulator(seed)
        if trace:
            self.sim.trace = []
        self.topology = Topology(spec.n_ues, spec.pep)
        self.thr = ThroughputCollector()
        self.flow_meta: dict[str, tuple] = {}
        self.flows: list[FlowRecord] = []
        self.voip_flows: list[DatagramFlow] = []
        self.probe: ProbeSource | None = None

        # endpoint dispatch tables, keyed by flow/connection id
        self.h_ue: list[dict] = [dict() for _ in range(spec.n_ues)]
        self.h_st: dict = {}
        self.h_st_sat: dict = {}
        self.h_gw_sat: dict = {}
        self.h_gw_core: dict = {}
        self.h_server: dict = {}

        self._build_network()
        self.runner = WorkloadRunner(self.sim, spec, self, self.recorder)

    # -- construction -----------------------------------------------------------

    def _build_network(self):
        spec = self.spec
        sim = self.sim
        sat_us = int(spec.sat_delay_ms * 1000)
        lte_us = int(spec.lte_delay_ms * 1000)
        core_us = int(spec.core_delay_ms * 1000)
        n = spec.n_ues

        self.lte_down = [DelayPipe(sim, f"lte_down{i + 1}", lte_us, self._make_ue_rx(i))
                         for i in range(n)]
        self.lte_up = [DelayPipe(sim, f"lte_up{i + 1}", lte_us, self._st_rx)
                       for i in range(n)]
        self.core_up = DelayPipe(sim, "core_up", core_us, self._server_rx)
        self.core_down = DelayPipe(sim, "core_down", core_us, self._gw_from_server)
        self.fwd_link = Link(sim, "fwd_sat", spec.forward_rate_bps, sat_us,
                             spec.fwd_buffer(), self._st_from_sat, voip_reserved=True)
        self.ret_link = Link(sim, "ret_sat", max(spec.cra_bps, 1), sat_us,
                             spec.ret_buffer(), self._gw_from_sat, voip_reserved=True)
        self.shaper_down = [TokenBucketShaper(sim, f"sla_down{i + 1}", spec.sla_down_bps,
                                              SHAPER_BURST_BYTES,
                                              spec.shaper_queue(spec.sla_down_bps),
                                              self.fwd_link.send)
                            for i in range(n)]
        self.shaper_up = [TokenBucketShaper(sim, f"sla_up{i + 1}", spec.sla_up_bps,
                                            SHAPER_BURST_BYTES,
                                            spec.shaper_queue(spec.sla_up_bps),
                                            self._ret_enqueue)
                          for i in range(n)]

        self.terminal = ReturnTerminal(
            sim, TerminalAccessState("st", spec.cra_bps, spec.rbdc_max_bps),
            self.ret_link, self.recorder)
        self.recorder.add("st", "dama_grant_bps", 0, float(spec.cra_bps))
        self.dama = DamaController(sim, spec.return_rate_bps, [self.terminal],
                                   recorder=self.recorder)

    # -- dispatchers --------------------------------------------------------------

    def _make_ue_rx(self, i: int):
        ue_id = f"ue{i + 1}"
        handlers = self.h_ue[i]
        thr = self.thr

        def ue_rx(pkt: Packet):
            if pkt.kind == DATA:
                thr.note(ue_id, "down", self.sim.now, pkt.size)
                payload = pkt.payload
                if payload[0] in ("seg", "pseg"):
                    thr.note(ue_id, "down_app", self.sim.now, payload[3] - payload[2])
            h = handlers.get(pkt.flow)
            if h is None:
                raise SimulationError(f"{ue_id}: no handler for flow {pkt.flow!r}")
            h(pkt)

        return ue_rx

    def _st_rx(self, pkt: Packet):
        """Traffic arriving at the satellite terminal from the radio side."""
        h = self.h_st.get(pkt.flow)
        if h is not None:
            h(pkt)
            return
        if pkt.kind == TPROBE and self.spec.pep:
            # transport-layer probe answered by the near-side proxy
            meta = self.flow_meta.get(pkt.flow)
            idx = meta[2] if meta else 0
            echo = Packet(TPROBE, pkt.size, pkt.created, pkt.flow, f"ue{idx + 1}")
            self.lte_down[idx].send(echo)
            return
        meta = self.flow_meta.get(pkt.flow)
        if meta is None:
            raise SimulationError(f"st: unknown upstream flow {pkt.flow!r}")
        if pkt.kind == VOIP:
            self._ret_enqueue(pkt)
        else:
            self.shaper_up[meta[2]].send(pkt)

    def _ret_enqueue(self, pkt: Packet):
        self.terminal.note_arrival(pkt.size)
        self.ret_link.send(pkt)

    def _st_from_sat(self, pkt: Packet):
        """Forward-link deliveries at the terminal side."""
        h = self.h_st_sat.get(pkt.flow)
        if h is not None:
            h(pkt)
            return
        meta = self.flow_meta.get(pkt.flow)
        if meta is None:
            raise SimulationError(f"st: unknown downstream flow {pkt.flow!r}")
        self.lte_down[meta[2]].send(pkt)

    def _gw_from_sat(self, pkt: Packet):
        """Return-link deliveries at the gateway side."""
        h = self.h_gw_sat.get(pkt.flow)
        if h is not None:
            h(pkt)
            return
        self.core_up.send(pkt)

    def _gw_from_server(self, pkt: Packet):
        h = self.h_gw_core.get(pkt.flow)
        if h is not None:
            h(pkt)
            return
        meta = self.flow_meta.get(pkt.flow)
        if meta is None:
            raise SimulationError(f"gw: unknown flow from core {pkt.flow!r}")
        self.shaper_down[meta[2]].send(pkt)

    def _server_rx(self, pkt: Packet):
        if pkt.kind == DATA:
            meta = self.flow_meta.get(pkt.flow)
            if meta is not None and meta[1] == "up":
                self.thr.note(meta[0], "up", self.sim.now, pkt.size)
                payload = pkt.payload
                if payload[0] in ("seg", "pseg"):
                    self.thr.note(meta[0], "up_app", self.sim.now, payload[3] - payload[2])
        h = self.h_server.get(pkt.flow)
        if h is None:
            raise SimulationError(f"server: no handler for flow {pkt.flow!r}")
        h(pkt)

    # -- flow factory (used by WorkloadRunner) ---------------------------------------

    def start_transfer(self, ue: int, direction: str, nbytes, flow_key: str,
                       on_complete=None, stop_after_s=None):
        i = ue - 1
        ue_id = f"ue{ue}"
        self.flow_meta[flow_key] = (ue_id, direction, i)
        if self.spec.pep:
            rec = self._start_pep_transfer(i, ue_id, direction, nbytes, flow_key)
        else:
            rec = self._start_direct_transfer(i, ue_id, direction, nbytes, flow_key)
        rec.nbytes = nbytes
        self.flows.append(rec)

        if on_complete is not None:
            prev = rec.end_conn.on_complete

            def complete(t_us, delivered, prev=prev):
                if prev is not None:
                    prev(t_us, delivered)
                on_complete(t_us, delivered)

            rec.end_conn.on_complete = complete

        client = rec.client_conn

        def connected(rtt_us):
            self.recorder.add(ue_id, "handshake_rtt_ms", self.sim.now, rtt_us / 1000.0)

        client.on_connected = connected
        client.open()
        if stop_after_s is not None:
            self.sim.schedule(self.sim.now + int(stop_after_s * SEC),
                              lambda _: rec.origin_conn.stop(), None)
        return rec

    def _start_direct_transfer(self, i, ue_id, direction, nbytes, key):
        data_side = "b" if direction == "down" else "a"
        app_bytes = nbytes

        def a_tx(pkt: Packet):
            pkt.dst = "server"
            self.lte_up[i].send(pkt)

        def b_tx(pkt: Packet):
            pkt.dst = ue_id
            self.core_down.send(pkt)

        conn = Connection(self.sim, key, a_tx, b_tx, data_side=data_side,
                          app_bytes=app_bytes)
        if nbytes is None:
            conn.push_app(1 << 40)
        self.h_ue[i][key] = lambda pkt: conn.on_packet("a", pkt)
        self.h_server[key] = lambda pkt: conn.on_packet("b", pkt)
        return FlowRecord(key, ue_id, direction, conn, conn, conn)

    def _start_pep_transfer(self, i, ue_id, direction, nbytes, key):
        spec = self.spec
        session = PepSession(key)
        sat_key = key + ".sat"
        wan_key = key + ".wan"
        self.flow_meta[sat_key] = (ue_id, direction, i)
        self.flow_meta[wan_key] = (ue_id, direction, i)

        def lan_a_tx(pkt: Packet):
            pkt.dst = "st"
            self.lte_up[i].send(pkt)

        def lan_b_tx(pkt: Packet):
            pkt.dst = ue_id
            self.lte_down[i].send(pkt)

        def wan_a_tx(pkt: Packet):
            pkt.dst = "server"
            self.core_up.send(pkt)

        def wan_b_tx(pkt: Packet):
            pkt.dst = "gw"
            self.core_down.send(pkt)

        if direction == "down":
            def sat_data_tx(pkt: Packet):
                pkt.dst = ue_id
                self.shaper_down[i].send(pkt)

            stream = PacedStream(self.sim, sat_key, sat_data_tx, self._ret_enqueue,
                                 int(spec.pep_rate_fraction * spec.sla_down_bps),
                                 deliver=lambda n: None)
            lan = Connection(self.sim, key, lan_a_tx, lan_b_tx, data_side="b",
                             app_bytes=None)
            wan = Connection(self.sim, wan_key, wan_a_tx, wan_b_tx, data_side="b",
                             app_bytes=nbytes,
                             recv_window=lambda: max(
                                 RELAY_BUFFER_BYTES - (stream.app_available - stream.cum_acked), 0))
            if nbytes is None:
                wan.push_app(1 << 40)

            def on_wan_deliver(n):
                session.bytes_in += n
                stream.push(n)

            wan.on_deliver = on_wan_deliver
            wan.on_complete = lambda t, n: stream.close()

            def on_sat_deliver(n):
                session.bytes_relayed += n
                lan.push_app(n)

            stream.deliver = on_sat_deliver
            stream.complete_cb = lan.close_app
            stream.credit_fn = lambda: RELAY_BUFFER_BYTES - (lan.app_available - lan.cum_acked)

            self.h_ue[i][key] = lambda pkt: lan.on_packet("a", pkt)
            self.h_st[key] = lambda pkt: lan.on_packet("b", pkt)
            self.h_st_sat[sat_key] = lambda pkt: stream.on_data(pkt.payload)
            self.h_gw_sat[sat_key] = lambda pkt: stream.on_feedback(pkt.payload)
            self.h_gw_core[wan_key] = lambda pkt: wan.on_packet("a", pkt)
            self.h_server[wan_key] = lambda pkt: wan.on_packet("b", pkt)
            session.lan_conn, session.wan_conn, session.sat_stream = lan, wan, stream
            # wan is opened by the gateway proxy as soon as the session exists
            wan.open()
            return FlowRecord(key, ue_id, "down", lan, lan, wan, session)

        # upload: subscriber -> terminal proxy -> paced return segment -> gateway -> server
        pace = int(spec.pep_rate_fraction * min(spec.sla_up_bps, spec.cra_bps or spec.sla_up_bps))

        def sat_up_tx(pkt: Packet):
            pkt.dst = "gw"
            self._ret_enqueue(pkt)

        def sat_fb_tx(pkt: Packet):
            pkt.dst = "st"
            self.fwd_link.send(pkt)

        stream = PacedStream(self.sim, sat_key, sat_up_tx, sat_fb_tx,
                             max(pace, 16_000), deliver=lambda n: None)
        if spec.pep_sees_grant:
            def on_grant(bps, stream=stream):
                stream.pace_cap_bps = max(int(spec.pep_rate_fraction * min(spec.sla_up_bps, bps)), 16_000)
                stream.pace_bps = stream.pace_cap_bps
            self.terminal.on_grant.append(on_grant)
        lan = Connection(self.sim, key, lan_a_tx, lan_b_tx, data_side="a",
                         app_bytes=nbytes,
                         recv_window=lambda: max(
                             RELAY_BUFFER_BYTES - (stream.app_available - stream.cum_acked), 0))
        if nbytes is None:
            lan.push_app(1 << 40)
        wan = Connection(self.sim, wan_key, wan_a_tx, wan_b_tx, data_side="a",
                         app_bytes=None)

        def on_lan_deliver(n):
            session.bytes_in += n
            stream.push(n)

        lan.on_deliver = on_lan_deliver
        lan.on_complete = lambda t, n: stream.close()

        def on_sat_deliver_up(n):
            session.bytes_relayed += n
            wan.push_app(n)

        stream.deliver = on_sat_deliver_up
        stream.complete_cb = wan.close_app
        stream.credit_fn = lambda: RELAY_BUFFER_BYTES - (wan.app_available - wan.cum_acked)

        self.h_ue[i][key] = lambda pkt: lan.on_packet("a", pkt)
        self.h_st[key] = lambda pkt: lan.on_packet("b", pkt)
        self.h_gw_sat[sat_key] = lambda pkt: stream.on_data(pkt.payload)
        self.h_st_sat[sat_key] = lambda pkt: stream.on_feedback(pkt.payload)
        self.h_gw_core[wan_key] = lambda pkt: wan.on_packet("a", pkt)
        self.h_server[wan_key] = lambda pkt: wan.on_packet("b", pkt)
        session.lan_conn, session.wan_conn, session.sat_stream = lan, wan, stream
        wan.open()
        return FlowRecord(key, ue_id, "up", lan, wan, lan, session)

    def start_voip(self, ue: int, rate_bps: int, duration_s: float, flow_key: str):
        i = ue - 1
        ue_id = f"ue{ue}"
        self.flow_meta[flow_key] = (ue_id, "down", i)

        def tx(pkt: Packet):
            pkt.dst = ue_id
            self.core_down.send(pkt)

        flow = DatagramFlow(self.sim, flow_key, tx, rate_bps, recorder=self.recorder,
                            ue_id=ue_id)
        self.h_ue[i][flow_key] = flow.on_packet
        flow.start(int(duration_s * SEC))
        self.voip_flows.append(flow)
        return flow

    def _start_probes(self):
        spec = self.spec
        i = spec.n_ues - 1
        ue_id = f"ue{spec.n_ues}"
        key = f"probe-{ue_id}"
        self.flow_meta[key] = (ue_id, "up", i)

        def tx(pkt: Packet):
            pkt.dst = "server"
            self.lte_up[i].send(pkt)

        probe = ProbeSource(self.sim, ue_id, tx, int(spec.probe_period_ms * 1000),
                            self.recorder)

        def server_echo(pkt: Packet):
            echo = Packet(pkt.kind, pkt.size, pkt.created, pkt.flow, ue_id)
            self.core_down.send(echo)

        self.h_server[key] = server_echo
        self.h_ue[i][key] = probe.on_echo
        self.probe = probe
        self.sim.schedule(500_000, lambda _: probe.start(int((spec.duration_s - 2.0) * SEC)),
                          None)

    # -- run ------------------------------------------------------------------------

    def run(self) -> Recorder:
        spec = self.spec
        self.dama.start()
        self.runner.schedule_all()
        if spec.rtt_probes:
            self._start_probes()
        self.sim.run_until(int(spec.duration_s * SEC))
        self._post_run()
        return self.recorder

    def _post_run(self):
        rec = self.recorder
        now = self.sim.now
        self.thr.flush(rec)
        # rate-convergence for bulk download subscribers
        from .metrics import convergence_time
        for ue_id, (start_us, role) in sorted(self.runner.conv_targets.items()):
            series = self.thr.series(ue_id, "down")
            conv = convergence_time(series, self.spec.sla_down_bps, start_us / SEC)
            metric = "conv_time_s" if role == "fg" else "conv_time_bg_s"
            if conv is not None:
                rec.add(ue_id, metric, now, conv)
                rec.add(ue_id, "converged", now, 1.0)
            else:
                rec.add(ue_id, "converged", now, 0.0)
        for flow in self.voip_flows:
            flow.record_summary()
        for fr in self.flows:
            end = fr.end_conn
            rec.add(fr.ue_id, "delivered_bytes", now, float(end.delivered_in_order))
            rec.add(fr.ue_id, "stream_intact", now,
                    1.0 if (end.stream_intact() or end.known_total < 0) else 0.0)
            rec.add(fr.ue_id, "retransmits", now, float(self._flow_retransmits(fr)))
        self._check_conservation()

    @staticmethod
    def _flow_retransmits(fr: FlowRecord) -> int:
        if fr.session is not None:
            return (fr.session.lan_conn.retransmits + fr.session.wan_conn.retransmits
                    + fr.session.sat_stream.retransmits)
        return fr.origin_conn.retransmits

    def stage_counters(self) -> dict:
        stages = {}
        for pipe in (self.lte_down + self.lte_up +
                     [self.core_up, self.core_down, self.fwd_link, self.ret_link] +
                     self.shaper_down + self.shaper_up):
            stages[pipe.name] = pipe.counters
        return stages

    def _check_conservation(self):
        for name, c in self.stage_counters().items():
            if not c.conserved():
                raise SimulationError(
                    f"conservation violated at {name}: offered={c.offered} "
                    f"dropped={c.dropped} delivered={c.delivered} inside={c.inside}")


def run_one(spec, seed: int, trace: bool = False) -> Recorder:
    """Build and execute a single seeded run."""
    return Simulation(spec, seed, trace=trace).run()
