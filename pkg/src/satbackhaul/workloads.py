"""Traffic generators: open-ended bulk transfers, sized fetches, a single-object
web page, the dual fetch (loaded then quiet network) and constant-rate voice."""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import SEC

BULK_KINDS = ("bulk_down", "bulk_up")
SIZED_KINDS = ("fetch_down", "fetch_up", "web_page")
KINDS = BULK_KINDS + SIZED_KINDS + ("voip", "fetch_twice")

COMPLETION_METRIC = {
    "fetch_down": "fetch_down_time_s",
    "fetch_up": "fetch_up_time_s",
    "web_page": "page_time_s",
}


@dataclass
class Workload:
    """One application activity bound to a subscriber."""

    kind: str
    ue: int
    start_s: float = 0.0
    size_bytes: int = 0
    rate_bps: int = 64_000
    duration_s: float = 0.0
    gap_s: float = 2.0
    role: str = "fg"          # fg: measured; bg: load-generating

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ue": self.ue, "start_s": self.start_s,
                "size_bytes": self.size_bytes, "rate_bps": self.rate_bps,
                "duration_s": self.duration_s, "gap_s": self.gap_s, "role": self.role}

    @staticmethod
    def from_dict(d: dict) -> "Workload":
        return Workload(**d)


class WorkloadRunner:
    """Schedules the workload list onto a running simulation.

    The factory supplies ``start_transfer``/``start_voip``; flow start times
    get a small seeded dither (no two stations ever start on the same tick in
    a deployed system).  The dual fetch arms its second transfer once every
    load-generating flow has finished.
    """

    def __init__(self, sim, spec, factory, recorder):
        self.sim = sim
        self.spec = spec
        self.factory = factory
        self.recorder = recorder
        self.flow_starts: dict[str, int] = {}    # ue_id -> actual first start (us)
        self.flow_roles: dict[str, str] = {}
        self.conv_targets: dict[str, tuple] = {}  # ue_id -> (start_us, role), bulk downloads
        self._bg_open = 0
        self._bg_spawned = 0
        self._bg_expected = sum(1 for w in spec.workloads if w.kind in BULK_KINDS)
        self._fetch2_pending: list[tuple] = []
        self._names_seen: set = set()

    # -- public -------------------------------------------------------------------

    def schedule_all(self) -> None:
        jitter_rng = self.sim.rng("jitter")
        jitter_us = int(self.spec.start_jitter_s * SEC)
        for idx, w in enumerate(self.spec.workloads):
            dither = jitter_rng.randint(0, jitter_us) if jitter_us > 0 else 0
            at = int(w.start_s * SEC) + dither
            self.sim.schedule(at, self._spawn, (idx, w))

    # -- spawning -------------------------------------------------------------------

    def _flow_key(self, w: Workload, suffix: str = "") -> str:
        key = f"{w.kind}-ue{w.ue}{suffix}"
        if key in self._names_seen:
            raise ValueError(f"duplicate workload {key}")
        self._names_seen.add(key)
        return key

    def _spawn(self, arg):
        idx, w = arg
        ue_id = f"ue{w.ue}"
        if w.kind in BULK_KINDS:
            key = self._flow_key(w)
            direction = "down" if w.kind == "bulk_down" else "up"
            self.flow_starts.setdefault(ue_id, self.sim.now)
            self.flow_roles[ue_id] = w.role
            if w.kind == "bulk_down":
                self.conv_targets[ue_id] = (self.sim.now, w.role)
            self._bg_open += 1
            self._bg_spawned += 1
            self.factory.start_transfer(
                ue=w.ue, direction=direction, nbytes=None, flow_key=key,
                stop_after_s=w.duration_s or None,
                on_complete=lambda t_us, n, k=key: self._bg_done(k))
        elif w.kind in SIZED_KINDS:
            key = self._flow_key(w)
            self._start_sized(w, key, COMPLETION_METRIC[w.kind])
        elif w.kind == "voip":
            key = self._flow_key(w)
            self.factory.start_voip(ue=w.ue, rate_bps=w.rate_bps,
                                    duration_s=w.duration_s, flow_key=key)
        elif w.kind == "fetch_twice":
            key = self._flow_key(w, "-1")
            fetch2_key = self._flow_key(w, "-2")
            self._fetch2_pending.append((w, fetch2_key))
            self._start_sized(w, key, "fetch1_time_s", direction="down",
                              chains_fetch2=(self._bg_expected == 0))
        else:
            raise ValueError(f"unknown workload kind {w.kind!r}")

    def _start_sized(self, w: Workload, key: str, metric: str, direction=None,
                     chains_fetch2: bool = False):
        ue_id = f"ue{w.ue}"
        if direction is None:
            direction = "up" if w.kind == "fetch_up" else "down"
        started = self.sim.now
        if ue_id not in self.flow_starts:
            self.flow_starts[ue_id] = started
            self.flow_roles[ue_id] = w.role

        def done(t_us, nbytes, metric=metric, started=started, ue_id=ue_id):
            self.recorder.add(ue_id, metric, t_us, (t_us - started) / SEC)
            if chains_fetch2:
                self._arm_fetch2()

        self.factory.start_transfer(ue=w.ue, direction=direction,
                                    nbytes=w.size_bytes, flow_key=key,
                                    on_complete=done)

    # -- dual-fetch arming ---------------------------------------------------------

    def _bg_done(self, key: str):
        self._bg_open -= 1
        if self._bg_open == 0 and self._bg_spawned == self._bg_expected:
            self._arm_fetch2()

    def _arm_fetch2(self):
        pending, self._fetch2_pending = self._fetch2_pending, []
        for w, key in pending:
            self.sim.schedule(self.sim.now + int(w.gap_s * SEC), self._spawn_fetch2, (w, key))

    def _spawn_fetch2(self, arg):
        w, key = arg
        ue_id = f"ue{w.ue}"
        started = self.sim.now

        def done(t_us, nbytes, started=started, ue_id=ue_id):
            self.recorder.add(ue_id, "fetch2_time_s", t_us, (t_us - started) / SEC)

        self.factory.start_transfer(ue=w.ue, direction="down", nbytes=w.size_bytes,
                                    flow_key=key, on_complete=done)
