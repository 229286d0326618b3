"""Return-link capacity assignment: per-terminal constant guarantee plus an
on-demand share granted through a geostationary request/allocation loop."""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import SEC, Simulator, SimulationError
from .network import Link

EWMA_ALPHA = 0.5


@dataclass
class TerminalAccessState:
    """Access configuration and demand-tracking state of one satellite terminal."""

    terminal_id: str
    cra_bps: int
    rbdc_max_bps: int
    rate_estimate_bps: float = 0.0
    pending_request_bps: float = 0.0
    current_grant_bps: int = 0

    def __post_init__(self):
        if self.current_grant_bps == 0:
            self.current_grant_bps = self.cra_bps


@dataclass
class AllocationPlan:
    epoch_us: int
    grants: dict = field(default_factory=dict)


def compute_request(state: TerminalAccessState, arrivals_bytes: int,
                    queued_bytes: int, interval_us: int) -> float:
    """Update the terminal's demand estimate and derive its on-demand request.

    The estimate is an EWMA of the queue arrival rate plus a backlog term;
    without the backlog term a cold-started terminal could never request
    capacity (nothing sent because nothing granted beyond the guarantee).
    """
    if interval_us <= 0:
        raise SimulationError("compute_request: interval must be positive")
    interval_s = interval_us / SEC
    sample_bps = (arrivals_bytes * 8 + queued_bytes * 8) / interval_s
    state.rate_estimate_bps = EWMA_ALPHA * sample_bps + (1.0 - EWMA_ALPHA) * state.rate_estimate_bps
    request = min(max(state.rate_estimate_bps - state.cra_bps, 0.0), float(state.rbdc_max_bps))
    state.pending_request_bps = request
    return request


def allocate(requests: list, capacity_bps: int, epoch_us: int = 0) -> AllocationPlan:
    """Turn (terminal_id, cra_bps, request_bps) triples into grants.

    Every terminal keeps its constant assignment; leftover capacity is shared
    across on-demand requests by proportional scaling, so the plan never
    exceeds the return channel.
    """
    total_cra = sum(cra for _, cra, _ in requests)
    if total_cra > capacity_bps:
        raise SimulationError(
            f"allocate: guaranteed assignments ({total_cra} bps) exceed return capacity ({capacity_bps} bps)")
    total_request = sum(req for _, _, req in requests)
    spare = capacity_bps - total_cra
    scale = 1.0 if total_request <= 0 else min(1.0, spare / total_request)
    plan = AllocationPlan(epoch_us=epoch_us)
    for tid, cra, req in requests:
        plan.grants[tid] = cra + req * scale
    return plan


class ReturnTerminal:
    """Satellite terminal side of the loop: owns the grant-served return queue."""

    def __init__(self, sim: Simulator, state: TerminalAccessState, link: Link, recorder=None):
        self.sim = sim
        self.state = state
        self.link = link
        self.recorder = recorder
        self.bytes_in = 0
        self._last_mark = 0
        self.on_grant: list = []
        link.set_rate(state.current_grant_bps)

    def note_arrival(self, size: int) -> None:
        self.bytes_in += size

    def take_interval_arrivals(self) -> int:
        arrivals = self.bytes_in - self._last_mark
        self._last_mark = self.bytes_in
        return arrivals

    def apply_grant(self, grant_bps: float) -> None:
        bps = int(grant_bps)
        if bps <= 0 and self.state.cra_bps > 0:
            raise SimulationError("grant of zero with a nonzero constant assignment")
        self.state.current_grant_bps = bps
        self.link.set_rate(bps)
        for cb in self.on_grant:
            cb(bps)
        if self.recorder is not None:
            self.recorder.add(self.state.terminal_id, "dama_grant_bps", self.sim.now, float(bps))


class DamaController:
    """Allocator plus the delayed request/grant message exchange.

    Each interval a terminal emits a request; the request travels one satellite
    hop up, is folded into the next allocation epoch, and the resulting plan
    travels one hop back down before the grant takes effect.
    """

    def __init__(self, sim: Simulator, capacity_bps: int, terminals: list,
                 interval_us: int = 500_000, sat_delay_us: int = 250_000, recorder=None):
        self.sim = sim
        self.capacity_bps = capacity_bps
        self.terminals = {t.state.terminal_id: t for t in terminals}
        self.interval_us = interval_us
        self.sat_delay_us = sat_delay_us
        self.recorder = recorder
        self._pending = {t.state.terminal_id: 0.0 for t in terminals}
        total_cra = sum(t.state.cra_bps for t in terminals)
        if total_cra > capacity_bps:
            raise SimulationError(
                f"constant assignments ({total_cra} bps) exceed return capacity ({capacity_bps} bps)")

    def start(self) -> None:
        self.sim.schedule(self.interval_us, self._terminal_tick, None)
        self.sim.schedule(self.interval_us, self._epoch, None)

    # -- terminal side --------------------------------------------------------

    def _terminal_tick(self, _):
        sim = self.sim
        for tid, term in self.terminals.items():
            arrivals = term.take_interval_arrivals()
            queued = term.link.q_occupancy
            request = compute_request(term.state, arrivals, queued, self.interval_us)
            if self.recorder is not None:
                self.recorder.add(tid, "dama_request_bps", sim.now, request)
            sim.schedule(sim.now + self.sat_delay_us, self._receive_request, (tid, request))
        sim.schedule(sim.now + self.interval_us, self._terminal_tick, None)

    def _receive_request(self, msg):
        tid, request = msg
        self._pending[tid] = request

    # -- allocator side --------------------------------------------------------

    def _epoch(self, _):
        sim = self.sim
        entries = [(tid, term.state.cra_bps, self._pending[tid])
                   for tid, term in self.terminals.items()]
        plan = allocate(entries, self.capacity_bps, epoch_us=sim.now)
        for tid, grant in plan.grants.items():
            sim.schedule(sim.now + self.sat_delay_us, self._apply, (tid, grant))
        sim.schedule(sim.now + self.interval_us, self._epoch, None)

    def _apply(self, msg):
        tid, grant = msg
        self.terminals[tid].apply_grant(grant)
