"""Repetition runner: seeds, optional process-level parallelism, CSV outputs."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor

from .metrics import Recorder, summarize_records, write_records_csv, write_summary_csv
from .scenario import ScenarioSpec
from .simulation import run_one


def _run_seed(payload):
    spec_dict, seed = payload
    spec = ScenarioSpec.from_dict(spec_dict).validated()
    rec = run_one(spec, seed)
    return (rec.run_id, rec.scenario_id, rec.cra_kbps, rec.rbdc_kbps, rec.pep,
            rec.seed, rec.rows)


def _rebuild(parts) -> Recorder:
    run_id, scenario_id, cra, rbdc, pep, seed, rows = parts
    rec = Recorder(run_id, scenario_id, cra, rbdc, pep, seed)
    rec.rows = rows
    return rec


def run_campaign(spec: ScenarioSpec, out_dir: str, reps: int | None = None,
                 parallel: int = 1) -> dict:
    """Run ``reps`` seeded repetitions (seed, seed+1, ...) and write the
    records, summary and resolved-scenario files into ``out_dir``.

    Each repetition is deterministic in its seed; repetitions share nothing,
    so they may run in separate processes.
    """
    spec = spec.validated()
    reps = spec.repetitions if reps is None else reps
    seeds = [spec.seed + k for k in range(reps)]
    if parallel > 1 and reps > 1:
        payloads = [(spec.to_dict(), s) for s in seeds]
        with ProcessPoolExecutor(max_workers=min(parallel, reps)) as pool:
            recorders = [_rebuild(parts) for parts in pool.map(_run_seed, payloads)]
    else:
        recorders = [run_one(spec, s) for s in seeds]

    os.makedirs(out_dir, exist_ok=True)
    records_path = os.path.join(out_dir, "records.csv")
    summary_path = os.path.join(out_dir, "summary.csv")
    scenario_path = os.path.join(out_dir, "scenario.json")
    write_records_csv(records_path, recorders)
    summary = summarize_records(recorders)
    write_summary_csv(summary_path, summary)
    with open(scenario_path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2)
        f.write("\n")
    return {"records": records_path, "summary": summary_path,
            "scenario": scenario_path, "recorders": recorders,
            "summary_rows": summary}
