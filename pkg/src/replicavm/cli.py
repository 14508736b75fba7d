"""replicavm command line.

Exit codes: 0 success, 2 verification failure, 3 infeasible placement or
scenario error, 1 anything else (bad arguments exit via argparse with 2).
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import bench as benchmod
from . import workloads
from .devices import DiskMode, VirtualClock
from .log import LogError, read_log
from .netsim import Scenario, ScenarioError, parse_scenario
from .recorder import record_run
from .replayer import ReplayError, replay_run
from .replication import run_scenario
from .scheduler import Infeasible, Topology, TopologyError, Weights, load_vms, place_replicas

EXIT_OK = 0
EXIT_VERIFY = 2
EXIT_INFEASIBLE = 3


def _add_workload_args(p, required=True):
    p.add_argument("--workload", required=required, choices=sorted(workloads.WORKLOADS))
    p.add_argument("--param", type=int, help="workload size (blocks for the disk workloads)")


def cmd_record(args) -> int:
    wl = workloads.get(args.workload)
    mode = DiskMode.parse(args.disk_mode)
    clock = VirtualClock(args.rate) if args.virtual else None
    st, bus = wl.build(mode, clock=clock, seed=args.seed, param=args.param)
    steps = args.steps if args.steps is not None else wl.steps
    duration = args.duration_ms if args.duration_ms is not None else (None if steps else wl.duration_ms)
    rx = benchmod.rx_schedule(wl, args.seed, duration)
    with open(args.out, "wb") as fh:
        r = record_run(st, bus, steps=steps, duration_ms=duration, stream=fh, rx=rx)
    print(f"recorded {args.workload}: {r.steps} steps, {st.nbranches} branches, "
          f"{len(r.log.frames)} frames, {r.log.nbytes} bytes -> {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    wl = workloads.get(args.workload)
    try:
        log = read_log(args.log)
    except LogError as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    mode = DiskMode(log.header.disk_mode)
    st, bus = wl.build(mode, seed=args.seed, param=args.param)
    snap = bus.disk.take_snapshot() if mode == DiskMode.FULL_REPLAY else None
    image = bus.disk.image if mode == DiskMode.OUTPUT_REPLAY else None
    try:
        res = replay_run(log, st, disk_image=image, snapshot=snap, seed=args.seed)
    except ReplayError as exc:
        print(f"replay failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    status = "verified" if res.verified else ("truncated" if res.truncated else "DIGEST MISMATCH")
    print(f"replayed {args.log}: {res.stats.steps} steps, {len(res.stats.injections)} interrupts, {status}")
    return EXIT_OK if res.verified else EXIT_VERIFY


def _scenario_from_args(args) -> Scenario:
    sc = Scenario(replicas=args.replicas, workload=args.workload, param=args.param,
                  delayed_sends=args.delayed_sends, drift_max=args.drift_max,
                  heartbeat_ms=args.heartbeat_ms, lag=args.lag, seed=args.seed,
                  duration_ms=args.duration_ms, client=("none",))
    for spec in args.slowdown or ():
        rid, factor = spec.split(":")
        sc.slowdown[int(rid)] = float(factor)
    return sc


def _drift_rows(report) -> list:
    rows = [{"wall_ms": f"{t:.3f}", "drift_branches": d} for t, d in report.drift_samples]
    rows.append({"wall_ms": "max", "drift_branches": report.max_drift})
    rows.append({"wall_ms": "mean", "drift_branches": f"{report.mean_drift:.1f}"})
    return rows


def _summary(report) -> str:
    out = [f"simulated {report.end_ms:.1f} ms, primary at {report.primary_nbranches} branches",
           f"drift max {report.max_drift} mean {report.mean_drift:.1f}, "
           f"{report.pauses} pauses ({report.paused_ms:.1f} ms)",
           f"released {report.released} packets, discarded {report.discarded}, "
           f"commit violations {report.commit_violations}"]
    for p in report.promotions:
        out.append(f"promotion {p.old_primary}->{p.new_primary}: detected {p.detected_ms:.1f} ms, "
                   f"live {p.live_ms:.1f} ms, rebound {p.rebound_ms:.1f} ms, "
                   f"rolled back {p.rollback_branches} branches")
    if report.lost:
        out.append("VM lost: no live secondary")
    if report.converged is not None:
        out.append("replicas converged" if report.converged else "replicas DID NOT converge")
    return "\n".join(out)


def cmd_cluster(args) -> int:
    report = run_scenario(_scenario_from_args(args))
    print(_summary(report))
    if args.csv:
        benchmod.write_csv(args.csv, _drift_rows(report), "replicavm-drift v1")
    return EXIT_VERIFY if report.converged is False or report.commit_violations else EXIT_OK


def _load_scenario(path) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read())


def cmd_faultinject(args) -> int:
    try:
        sc = _load_scenario(args.scenario)
        if args.seed_given:
            sc.seed = args.seed
        report = run_scenario(sc)
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(_summary(report))
    promo = report.promotions[0] if report.promotions else None
    row = {
        "unresponsive_window_ms": "" if report.unresponsive_ms is None else f"{report.unresponsive_ms:.3f}",
        "promotion_ms": "" if promo is None else f"{promo.promotion_ms:.3f}",
        "failover_ms": "" if promo is None or promo.failover_ms is None else f"{promo.failover_ms:.3f}",
        "regression_detected": "" if report.stream is None else report.stream.regression_detected,
        "completed": "" if report.stream is None else report.stream.completed,
        "stalled": "" if report.stream is None else report.stream.stalled,
        "median_rtt_ms": "" if report.median_rtt is None else f"{report.median_rtt:.3f}",
        "lost": report.lost,
    }
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    if args.csv:
        benchmod.write_csv(args.csv, [row], "replicavm-failover v1")
    return EXIT_OK


def cmd_drift_report(args) -> int:
    if args.scenario:
        try:
            sc = _load_scenario(args.scenario)
        except ScenarioError as exc:
            print(f"{args.scenario}: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
    else:
        sc = _scenario_from_args(args)
    report = run_scenario(sc)
    rows = _drift_rows(report)
    if args.csv:
        benchmod.write_csv(args.csv, rows, "replicavm-drift v1")
    else:
        print("wall_ms,drift_branches")
        for r in rows:
            print(f"{r['wall_ms']},{r['drift_branches']}")
    return EXIT_OK


def cmd_bench(args) -> int:
    wl = workloads.get(args.workload)
    modes = tuple(args.modes.split(","))
    for m in modes:
        if m not in benchmod.MODES:
            raise SystemExit(f"unknown mode {m!r}")
    rows = benchmod.bench(wl, reps=args.reps, modes=modes, seed=args.seed,
                          disk_mode=DiskMode.parse(args.disk_mode), steps=args.steps,
                          duration_ms=args.duration_ms)
    for r in benchmod.medians(rows).values():
        flag = "" if r.valid else "  INVALID"
        print(f"{r.workload:10s} {r.mode:8s} {r.wall_ms:10.1f} ms  {r.instructions:>10d} instr  "
              f"{r.log_bytes:>9d} B  {r.bytes_per_kinstr:8.3f} B/kinstr{flag}")
    if args.csv:
        benchmod.write_csv(args.csv, rows)
    return EXIT_OK if all(r.valid for r in rows) else EXIT_VERIFY


def cmd_sched_plan(args) -> int:
    try:
        topo = Topology.load(args.topology)
        vms = load_vms(args.vms)
    except (TopologyError, KeyError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    w = Weights(args.alpha, args.beta, args.gamma, args.u_max)
    try:
        placements, util = place_replicas(topo, vms, args.replicas, w)
    except Infeasible as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE
    rows = []
    for p in placements:
        print(f"{p.vm}: primary {p.primary}, secondaries {', '.join(p.secondaries)}; "
              f"cost {p.cost:.2f} = {w.alpha}*{p.storage_cost:g} + {w.beta}*{p.stream_cost:g}"
              f" - {w.gamma}*{p.branches}")
        rows.append({"vm": p.vm, "primary": p.primary, "secondaries": " ".join(p.secondaries),
                     "storage_cost": p.storage_cost, "stream_cost": p.stream_cost,
                     "branches": p.branches, "cost": p.cost})
    if args.csv:
        benchmod.write_csv(args.csv, rows, "replicavm-placement v1")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replicavm", description="record/replay VM replication toolkit")
    parser.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")
    parser.add_argument("--csv", metavar="PATH", help="write metrics as CSV")
    # the global flags are accepted after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--csv", metavar="PATH", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("record", help="record a workload to a log file")
    _add_workload_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--disk-mode", default="full", help="full or output")
    p.add_argument("--steps", type=int)
    p.add_argument("--duration-ms", type=float)
    p.add_argument("--virtual", action="store_true", help="simulated clock instead of wall time")
    p.add_argument("--rate", type=float, default=500.0, help="steps per simulated ms with --virtual")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("replay", help="replay a log and verify its final digest")
    _add_workload_args(p)
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_replay)

    def cluster_args(p, required=True):
        _add_workload_args(p, required)
        p.add_argument("--replicas", type=int, default=3)
        p.add_argument("--drift-max", type=int, default=100_000)
        p.add_argument("--delayed-sends", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--heartbeat-ms", type=float, default=100.0)
        p.add_argument("--lag", type=int, default=0, help="induced replay lag in branches")
        p.add_argument("--slowdown", action="append", metavar="ID:FACTOR")
        p.add_argument("--duration-ms", type=float, default=1000.0)

    p = sub.add_parser("cluster", help="run a primary and its secondaries without faults")
    cluster_args(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("faultinject", help="run a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_faultinject)

    p = sub.add_parser("drift-report", help="drift time series of a cluster run")
    p.add_argument("--scenario")
    cluster_args(p, required=False)
    p.set_defaults(func=cmd_drift_report)

    p = sub.add_parser("bench", help="baseline/record/replay timings")
    _add_workload_args(p)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--modes", default="baseline,record,replay")
    p.add_argument("--disk-mode", default="full")
    p.add_argument("--steps", type=int)
    p.add_argument("--duration-ms", type=float)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sched", help="replica placement")
    ssub = p.add_subparsers(dest="sched_command", required=True)
    q = ssub.add_parser("plan", parents=[common], help="place every VM's replicas")
    q.add_argument("--topology", required=True)
    q.add_argument("--vms", required=True)
    q.add_argument("--replicas", type=int, default=3)
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=1.0)
    q.add_argument("--gamma", type=float, default=0.5)
    q.add_argument("--u-max", type=float, default=0.7)
    q.set_defaults(func=cmd_sched_plan)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if getattr(args, "workload", None) is None and args.command == "drift-report" and not args.scenario:
        print("drift-report needs --scenario or --workload", file=sys.stderr)
        return 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
