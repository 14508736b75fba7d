"""Baseline / record / replay timing rows and the CSV they are written to."""

from __future__ import annotations

import csv
import random
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .devices import DiskMode, RealClock
from .log import RecordLog
from .recorder import record_run
from .replayer import replay_run
from .workloads import Workload

SCHEMA = "replicavm-metrics v1"
MODES = ("baseline", "record", "replay")


@dataclass
class MetricsRow:
    workload: str
    mode: str
    rep: str
    wall_ms: float
    instructions: int
    branches: int
    log_bytes: int
    bytes_per_sec: float
    bytes_per_kinstr: float
    valid: bool = True
    drift_ref: str = ""


def _row(wl: str, mode: str, rep, wall_s: float, steps: int, branches: int,
         log: Optional[RecordLog], valid: bool = True) -> MetricsRow:
    nbytes = log.nbytes if log is not None else 0
    return MetricsRow(wl, mode, str(rep), wall_s * 1000.0, steps, branches, nbytes,
                      nbytes / wall_s if wall_s > 0 else 0.0,
                      nbytes / (steps / 1000.0) if steps else 0.0, valid)


def rx_schedule(wl: Workload, seed: int, duration_ms: Optional[float]) -> list:
    """Inbound frames for the network-facing workloads: one every 5 ms."""
    if wl.name not in ("netrx", "pingserver") or not duration_ms:
        return []
    rng = random.Random(seed)
    return [(t, rng.randbytes(64)) for t in range(0, int(duration_ms), 5)]


@dataclass
class RunResult:
    row: MetricsRow
    log: Optional[RecordLog] = None


def run_once(wl: Workload, mode: str, seed: int = 0, rep=0, disk_mode: DiskMode = DiskMode.FULL_REPLAY,
             steps: Optional[int] = None, duration_ms: Optional[float] = None,
             log: Optional[RecordLog] = None) -> RunResult:
    """One timed run.  ``replay`` needs the ``log`` of a matching record run."""
    steps = steps if steps is not None else wl.steps
    duration_ms = duration_ms if duration_ms is not None else (None if steps else wl.duration_ms)
    st, bus = wl.build(disk_mode, clock=RealClock(), seed=seed)
    init = st.copy()
    if mode == "replay":
        if log is None:
            raise ValueError("replay needs a recorded log")
        pristine = None if disk_mode == DiskMode.FULL_REPLAY else wl.build(disk_mode, seed=seed)[1].disk.image
        snap = bus.disk.take_snapshot() if disk_mode == DiskMode.FULL_REPLAY else None
        t0 = time.perf_counter()
        res = replay_run(log, init, disk_image=pristine, snapshot=snap, seed=seed)
        wall = time.perf_counter() - t0
        return RunResult(_row(wl.name, mode, rep, wall, res.stats.steps, res.state.nbranches,
                              log, res.verified))
    rx = rx_schedule(wl, seed, duration_ms)
    t0 = time.perf_counter()
    r = record_run(st, bus, steps=steps, duration_ms=duration_ms, record=(mode == "record"), rx=rx)
    wall = time.perf_counter() - t0
    return RunResult(_row(wl.name, mode, rep, wall, r.steps, st.nbranches, r.log), r.log)


def median_row(rows: list) -> MetricsRow:
    first = rows[0]
    med = lambda attr: statistics.median(getattr(r, attr) for r in rows)  # noqa: E731
    return MetricsRow(first.workload, first.mode, "median", med("wall_ms"), int(med("instructions")),
                      int(med("branches")), int(med("log_bytes")), med("bytes_per_sec"),
                      med("bytes_per_kinstr"), all(r.valid for r in rows))


def bench(wl: Workload, reps: int = 5, modes=MODES, seed: int = 0,
          disk_mode: DiskMode = DiskMode.FULL_REPLAY, steps: Optional[int] = None,
          duration_ms: Optional[float] = None) -> list:
    """Interleaved repetitions (baseline, record, replay per round) plus one median row per mode."""
    per_mode = {m: [] for m in modes}
    for rep in range(reps):
        log = None
        for mode in modes:
            if mode == "replay" and log is None:
                log = run_once(wl, "record", seed, rep, disk_mode, steps, duration_ms).log
            r = run_once(wl, mode, seed, rep, disk_mode, steps, duration_ms, log=log)
            if mode == "record":
                log = r.log
            per_mode[mode].append(r.row)
    rows = []
    for mode in modes:
        rows += per_mode[mode]
        rows.append(median_row(per_mode[mode]))
    return rows


def medians(rows: list) -> dict:
    return {r.mode: r for r in rows if r.rep == "median"}


def write_csv(path, rows: list, schema: str = SCHEMA) -> None:
    """CSV with a ``# schema:`` comment line ahead of the header."""
    if not rows:
        raise ValueError("no rows")
    cols = [f.name for f in fields(rows[0])] if not isinstance(rows[0], dict) else list(rows[0])
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r if isinstance(r, dict) else asdict(r))


def read_csv(path) -> tuple:
    """(schema, rows as dicts)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError("missing schema line")
        return first.split(":", 1)[1].strip(), list(csv.DictReader(fh))
