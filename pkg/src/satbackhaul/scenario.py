"""Declarative experiment descriptions, validation, and the built-in campaigns."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .workloads import Workload, KINDS, BULK_KINDS

KBPS = 1_000
MBPS = 1_000_000


class ConfigError(Exception):
    """Invalid scenario configuration; maps to CLI exit code 2."""


@dataclass
class ScenarioSpec:
    """Complete, self-contained description of one experiment configuration."""

    scenario_id: str
    n_ues: int = 10
    forward_rate_bps: int = 20 * MBPS
    return_rate_bps: int = 1 * MBPS
    cra_bps: int = 500 * KBPS
    rbdc_max_bps: int = 500 * KBPS
    pep: bool = False
    sla_down_bps: int = 2 * MBPS
    sla_up_bps: int = 2 * MBPS
    duration_s: float = 40.0
    seed: int = 1
    repetitions: int = 5
    workloads: list[Workload] = field(default_factory=list)
    # propagation defaults: geostationary hop, radio access leg, core leg
    sat_delay_ms: float = 250.0
    lte_delay_ms: float = 20.0
    core_delay_ms: float = 10.0
    # buffer overrides (None: one bandwidth-delay product at the 600 ms path RTT)
    fwd_buffer_bytes: int | None = None
    ret_buffer_bytes: int | None = None
    shaper_queue_bytes: int | None = None
    start_jitter_s: float = 0.25
    rtt_probes: bool = False
    probe_period_ms: float = 500.0
    pep_sees_grant: bool = False
    pep_rate_fraction: float = 1.0

    # -- derived -----------------------------------------------------------------

    def fwd_buffer(self) -> int:
        if self.fwd_buffer_bytes is not None:
            return self.fwd_buffer_bytes
        return int(self.forward_rate_bps * 0.600 / 8)

    def ret_buffer(self) -> int:
        if self.ret_buffer_bytes is not None:
            return self.ret_buffer_bytes
        return int(self.return_rate_bps * 0.600 / 8)

    def shaper_queue(self, rate_bps: int) -> int:
        if self.shaper_queue_bytes is not None:
            return self.shaper_queue_bytes
        return max(int(rate_bps * 0.600 / 8), 30_000)

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workloads"] = [w.to_dict() for w in self.workloads]
        return d

    @staticmethod
    def from_dict(d: dict) -> "ScenarioSpec":
        d = dict(d)
        workloads = [Workload.from_dict(w) if isinstance(w, dict) else w
                     for w in d.pop("workloads", [])]
        known = set(ScenarioSpec.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
        spec = ScenarioSpec(workloads=workloads, **d)
        return spec

    # -- validation ---------------------------------------------------------------

    def validated(self) -> "ScenarioSpec":
        """Check invariants; clamp a full-channel on-demand cap to the spare capacity."""
        if self.n_ues < 1:
            raise ConfigError("n_ues must be at least 1")
        if self.forward_rate_bps <= 0 or self.return_rate_bps <= 0:
            raise ConfigError("link rates must be positive")
        if self.sla_down_bps <= 0 or self.sla_up_bps <= 0:
            raise ConfigError("SLA rates must be positive")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.cra_bps < 0 or self.rbdc_max_bps < 0:
            raise ConfigError("access rates must be non-negative")
        if self.cra_bps > self.return_rate_bps:
            raise ConfigError(
                f"cra_bps ({self.cra_bps}) exceeds return capacity ({self.return_rate_bps})")
        if self.cra_bps + self.rbdc_max_bps > self.return_rate_bps:
            if self.rbdc_max_bps >= self.return_rate_bps:
                # "request up to the whole channel": effective cap is the spare capacity
                self.rbdc_max_bps = self.return_rate_bps - self.cra_bps
            else:
                raise ConfigError(
                    f"cra_bps + rbdc_max_bps ({self.cra_bps + self.rbdc_max_bps}) exceeds "
                    f"return capacity ({self.return_rate_bps})")
        seen = set()
        latest_start = 0.0
        for w in self.workloads:
            if w.kind not in KINDS:
                raise ConfigError(f"unknown workload kind {w.kind!r}")
            if not 1 <= w.ue <= self.n_ues:
                raise ConfigError(f"workload ue {w.ue} outside 1..{self.n_ues}")
            if w.kind not in BULK_KINDS and w.kind != "voip" and w.size_bytes < 0:
                raise ConfigError(f"workload {w.kind} needs size_bytes >= 0")
            if w.kind == "voip" and (w.rate_bps <= 0 or w.duration_s <= 0):
                raise ConfigError("voip workload needs positive rate and duration")
            ident = (w.kind, w.ue, w.start_s)
            if ident in seen:
                raise ConfigError(f"overlapping identical workload {w.kind} on ue{w.ue}")
            seen.add(ident)
            latest_start = max(latest_start, w.start_s)
        if self.workloads and self.duration_s <= latest_start:
            raise ConfigError("duration_s must exceed the latest workload start")
        return self


# -- file I/O --------------------------------------------------------------------


def save_scenario(spec: ScenarioSpec, path: str) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2)
        f.write("\n")


def _key_line(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return i
    return 1


def load_scenario(source: str) -> ScenarioSpec:
    """Load ``builtin:<name>`` or a JSON scenario file; returns a validated spec."""
    if source.startswith("builtin:"):
        return builtin_scenario(source.split(":", 1)[1])
    try:
        with open(source) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"{source}: cannot read scenario file: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}: invalid JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: scenario must be a JSON object")
    try:
        spec = ScenarioSpec.from_dict(data)
        return spec.validated()
    except ConfigError as e:
        msg = str(e)
        key = msg.split("'")[1] if "'" in msg else msg.split()[0]
        raise ConfigError(f"{source}:{_key_line(text, key)}: {msg}") from e
    except TypeError as e:
        raise ConfigError(f"{source}:1: {e}") from e


# -- built-in campaigns -------------------------------------------------------------

WEB_PAGE_BYTES = 6_500_000      # single-object page: optimal time 26 s on a 2 Mbps share
SHORT_DOWN_BYTES = 1_000_000
SHORT_UP_BYTES = 300_000
DUAL_FETCH_BYTES = 3_000_000
VOIP_RATE_BPS = 64_000

_BUILTIN_SUMMARY = {
    "A": "10 simultaneous bulk downloads; rate-convergence sweep over access splits (report table I)",
    "B": "9 established downloads plus a late joiner; late-UE convergence (report table II)",
    "C": "mixed long/short transfers both ways; short-flow times (report table III)",
    "D": "loaded cell, one subscriber fetches a 6.5 MB page; proxy on/off (report table IV)",
    "E": "loaded then quiet cell, dual file fetch; proxy on/off (report tables V/VI)",
    "V": "single-station sanity runs: throughput ramps and both round-trip probe kinds (report figures)",
}


def builtin_names() -> list[str]:
    return list(_BUILTIN_SUMMARY)


def builtin_summary(name: str) -> str:
    return _BUILTIN_SUMMARY[name]


def _bg_mixed(n_down: int, up_ues: list[int], duration: float) -> list[Workload]:
    ws = [Workload("bulk_down", ue=i, start_s=0.0, duration_s=duration, role="bg")
          for i in range(1, n_down + 1)]
    ws += [Workload("bulk_up", ue=u, start_s=0.0, duration_s=duration, role="bg")
           for u in up_ues]
    return ws


def builtin_scenario(name: str, cra_kbps: int | None = None, rbdc_kbps: int | None = None,
                     pep: bool | None = None, seed: int | None = None,
                     repetitions: int | None = None) -> ScenarioSpec:
    base = name
    if base == "A":
        spec = ScenarioSpec(
            scenario_id="A", duration_s=40.0,
            workloads=[Workload("bulk_down", ue=i, start_s=0.0, duration_s=30.0)
                       for i in range(1, 11)])
    elif base == "B":
        ws = [Workload("bulk_down", ue=i, start_s=0.0, duration_s=40.0, role="bg")
              for i in range(1, 10)]
        ws.append(Workload("bulk_down", ue=10, start_s=10.0, duration_s=30.0))
        spec = ScenarioSpec(scenario_id="B", duration_s=45.0, workloads=ws)
    elif base == "C":
        ws = _bg_mixed(7, [9], 30.0)
        ws.append(Workload("fetch_down", ue=8, start_s=10.0, size_bytes=SHORT_DOWN_BYTES))
        ws.append(Workload("fetch_up", ue=10, start_s=10.0, size_bytes=SHORT_UP_BYTES))
        spec = ScenarioSpec(scenario_id="C", duration_s=45.0, sla_up_bps=300 * KBPS,
                            workloads=ws)
    elif base == "D":
        ws = _bg_mixed(7, [8, 9], 30.0)
        ws.append(Workload("web_page", ue=10, start_s=10.0, size_bytes=WEB_PAGE_BYTES))
        spec = ScenarioSpec(scenario_id="D", duration_s=55.0, sla_up_bps=100 * KBPS,
                            repetitions=10, cra_bps=100 * KBPS, rbdc_max_bps=900 * KBPS,
                            workloads=ws)
    elif base == "D-voip":
        ws = _bg_mixed(7, [8, 9], 30.0)
        ws.append(Workload("voip", ue=10, start_s=10.0, rate_bps=VOIP_RATE_BPS,
                           duration_s=30.0))
        spec = ScenarioSpec(scenario_id="D-voip", duration_s=50.0, sla_up_bps=100 * KBPS,
                            cra_bps=100 * KBPS, rbdc_max_bps=900 * KBPS, workloads=ws)
    elif base == "E":
        ws = _bg_mixed(7, [8, 9], 30.0)
        ws.append(Workload("fetch_twice", ue=10, start_s=10.0,
                           size_bytes=DUAL_FETCH_BYTES, gap_s=2.0))
        spec = ScenarioSpec(scenario_id="E", duration_s=60.0, sla_up_bps=100 * KBPS,
                            cra_bps=100 * KBPS, rbdc_max_bps=900 * KBPS, workloads=ws)
    elif base == "V":
        ws = [Workload("bulk_down", ue=1, start_s=0.0, duration_s=30.0),
              Workload("bulk_up", ue=2, start_s=0.0, duration_s=30.0)]
        spec = ScenarioSpec(scenario_id="V", n_ues=3, duration_s=35.0,
                            forward_rate_bps=20 * MBPS, return_rate_bps=10 * MBPS,
                            cra_bps=2 * MBPS, rbdc_max_bps=8 * MBPS, pep=True,
                            sla_down_bps=20 * MBPS, sla_up_bps=8 * MBPS,
                            rtt_probes=True, pep_sees_grant=True, workloads=ws)
    elif base == "CAL":
        spec = ScenarioSpec(
            scenario_id="CAL", n_ues=1, duration_s=60.0, repetitions=1,
            cra_bps=1000 * KBPS, rbdc_max_bps=0,
            workloads=[Workload("bulk_down", ue=1, start_s=0.0, duration_s=58.0)])
    else:
        raise ConfigError(f"unknown builtin scenario {name!r}")

    if cra_kbps is not None:
        spec.cra_bps = cra_kbps * KBPS
    if rbdc_kbps is not None:
        spec.rbdc_max_bps = rbdc_kbps * KBPS
    if pep is not None:
        spec.pep = pep
    if seed is not None:
        spec.seed = seed
    if repetitions is not None:
        spec.repetitions = repetitions
    return spec.validated()
