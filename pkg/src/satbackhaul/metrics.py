"""Measurement plane: throughput series, rate-convergence time, round-trip
probes, per-run records and cross-run aggregation with the CSV schemas the
reporting tools consume."""

from __future__ import annotations

import csv
import os
import tempfile

from .engine import SEC, Simulator
from .network import PROBE, TPROBE, Packet

BIN_US = 500_000
RECORDS_HEADER = ["run_id", "scenario_id", "cra_kbps", "rbdc_kbps", "pep", "seed",
                  "ue_id", "metric_name", "t_s", "value"]
SUMMARY_HEADER = ["scenario_id", "cra_kbps", "rbdc_kbps", "pep", "metric_name",
                  "mean", "min", "max", "count"]

# metric names that describe one scalar observation per run (summarised across
# repetitions); time-series metrics stay in the records file only
SCALAR_METRICS = {
    "conv_time_s", "conv_time_bg_s", "fetch_down_time_s", "fetch_up_time_s",
    "page_time_s", "fetch1_time_s", "fetch2_time_s",
    "voip_delay_ms", "voip_jitter_ms", "voip_loss_pct",
    "handshake_rtt_ms", "delivered_bytes", "retransmits",
}


class Recorder:
    """Collects (ue, metric, time, value) samples for one run."""

    def __init__(self, run_id: str, scenario_id: str, cra_kbps: int, rbdc_kbps: int,
                 pep: bool, seed: int):
        self.run_id = run_id
        self.scenario_id = scenario_id
        self.cra_kbps = cra_kbps
        self.rbdc_kbps = rbdc_kbps
        self.pep = pep
        self.seed = seed
        self.rows: list[tuple] = []

    def add(self, ue_id: str, metric: str, t_us: int, value: float) -> None:
        self.rows.append((ue_id, metric, t_us, value))

    def csv_rows(self):
        pep = "on" if self.pep else "off"
        head = (self.run_id, self.scenario_id, str(self.cra_kbps), str(self.rbdc_kbps),
                pep, str(self.seed))
        for ue_id, metric, t_us, value in self.rows:
            yield head + (ue_id, metric, f"{t_us / SEC:.6f}", f"{value:.6f}")

    def values(self, metric: str, ue_id: str | None = None) -> list[float]:
        return [v for u, m, _, v in self.rows
                if m == metric and (ue_id is None or u == ue_id)]


class ThroughputCollector:
    """Per-subscriber, per-direction delivered-bits series in fixed 500 ms bins."""

    def __init__(self):
        self.bins: dict[tuple, list] = {}

    def note(self, ue_id: str, direction: str, t_us: int, nbytes: int) -> None:
        key = (ue_id, direction)
        series = self.bins.get(key)
        if series is None:
            series = []
            self.bins[key] = series
        idx = t_us // BIN_US
        if idx >= len(series):
            series.extend([0] * (idx + 1 - len(series)))
        series[idx] += nbytes * 8

    _METRIC_BY_DIR = {"down": "thr_down_bps", "up": "thr_up_bps",
                      "down_app": "gput_down_bps", "up_app": "gput_up_bps"}

    def flush(self, recorder: Recorder) -> None:
        scale = SEC / BIN_US
        for (ue_id, direction), series in sorted(self.bins.items()):
            metric = self._METRIC_BY_DIR[direction]
            for idx, bits in enumerate(series):
                recorder.add(ue_id, metric, idx * BIN_US, bits * scale)

    def series(self, ue_id: str, direction: str) -> list[float]:
        scale = SEC / BIN_US
        return [bits * scale for bits in self.bins.get((ue_id, direction), [])]


def convergence_time(series_bps: list, sla_bps: float, flow_start_s: float,
                     bin_s: float = 0.5, threshold: float = 0.95,
                     smooth_s: float = 1.0, hold_s: float = 3.0):
    """Seconds from flow start until the smoothed rate reaches and holds the
    subscriber's contracted rate; ``None`` when it never does.

    The rate is smoothed over ``smooth_s`` and must stay above
    ``threshold * sla_bps`` for ``hold_s`` consecutive seconds, so transient
    spikes during the initial ramp do not register as convergence.
    """
    if sla_bps <= 0 or not series_bps:
        return None
    win = max(1, round(smooth_s / bin_s))
    hold = max(1, round(hold_s / bin_s))
    n = len(series_bps)
    if n < win:
        return None
    moving = [sum(series_bps[i:i + win]) / win for i in range(n - win + 1)]
    target = threshold * sla_bps
    first_idx = 0
    while first_idx * bin_s < flow_start_s:
        first_idx += 1
    run = 0
    for i in range(first_idx, len(moving)):
        if moving[i] >= target:
            run += 1
            if run >= hold:
                start_i = i - hold + 1
                return start_i * bin_s - flow_start_s
        else:
            run = 0
    return None


def aggregate(records: list[dict], group_keys: list[str],
              value_key: str = "value") -> list[dict]:
    """Group rows and reduce to the mean/min/max/count statistic set."""
    groups: dict[tuple, list] = {}
    for row in records:
        key = tuple(row[k] for k in group_keys)
        groups.setdefault(key, []).append(float(row[value_key]))
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        vals = groups[key]
        row = dict(zip(group_keys, key))
        row.update(mean=sum(vals) / len(vals), min=min(vals), max=max(vals),
                   count=len(vals))
        out.append(row)
    return out


class ProbeSource:
    """Periodic round-trip probes from a subscriber toward the server.

    Network-layer probes are answered by the far end; transport-layer probes
    are answered by whichever split-connection proxy sits on the path, which
    is what makes an active proxy read as near-zero latency.
    """

    def __init__(self, sim: Simulator, ue_id: str, tx, period_us: int = 500_000,
                 recorder: Recorder | None = None):
        self.sim = sim
        self.ue_id = ue_id
        self.tx = tx
        self.period_us = period_us
        self.recorder = recorder
        self.stop_at = None
        self._n = 0

    def start(self, duration_us: int) -> None:
        self.stop_at = self.sim.now + duration_us
        self._emit(None)

    def _emit(self, _):
        if self.sim.now >= self.stop_at:
            return
        self._n += 1
        for kind in (PROBE, TPROBE):
            self.tx(Packet(kind, 64, self.sim.now, f"probe-{self.ue_id}", None,
                           ("probe", self.ue_id, self._n)))
        self.sim.schedule(self.sim.now + self.period_us, self._emit, None)

    def on_echo(self, pkt: Packet) -> None:
        rtt_ms = (self.sim.now - pkt.created) / 1000.0
        metric = "rtt_pep_ms" if pkt.kind == TPROBE else "rtt_net_ms"
        if self.recorder is not None:
            self.recorder.add(self.ue_id, metric, self.sim.now, rtt_ms)


# -- CSV files ----------------------------------------------------------------


def _atomic_write(path: str, write_fn) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            write_fn(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records_csv(path: str, recorders: list[Recorder]) -> None:
    def _write(f):
        w = csv.writer(f)
        w.writerow(RECORDS_HEADER)
        for rec in recorders:
            for row in rec.csv_rows():
                w.writerow(row)
    _atomic_write(path, _write)


def write_summary_csv(path: str, summary_rows: list[dict]) -> None:
    def _write(f):
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for row in summary_rows:
            w.writerow([row["scenario_id"], row["cra_kbps"], row["rbdc_kbps"],
                        row["pep"], row["metric_name"],
                        f"{row['mean']:.6f}", f"{row['min']:.6f}",
                        f"{row['max']:.6f}", str(row["count"])])
    _atomic_write(path, _write)


def read_csv_dicts(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize_records(recorders: list[Recorder]) -> list[dict]:
    """One mean/min/max/count row per (scenario, access, pep, metric) over the
    scalar per-run observations."""
    rows = []
    for rec in recorders:
        pep = "on" if rec.pep else "off"
        for ue_id, metric, t_us, value in rec.rows:
            if metric in SCALAR_METRICS:
                rows.append({"scenario_id": rec.scenario_id, "cra_kbps": rec.cra_kbps,
                             "rbdc_kbps": rec.rbdc_kbps, "pep": pep,
                             "metric_name": metric, "value": value})
    return aggregate(rows, ["scenario_id", "cra_kbps", "rbdc_kbps", "pep", "metric_name"])
