"""Seeded cluster experiments: failover consistency, failover latency, drift bound,
and latency/completion against an induced replay lag."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .netsim import FaultEvent, Scenario
from .replication import ScenarioReport, run_scenario

STREAM_BLOCKS = 64
FRAMES_PER_BLOCK = 4


def stream_scenario(seed: int = 0, delayed_sends: bool = True, lag: int = 0,
                    kill_ms: Optional[float] = None, blocks: int = STREAM_BLOCKS) -> Scenario:
    sc = Scenario(workload="streamcopy", param=blocks, delayed_sends=delayed_sends, lag=lag,
                  client=("stream", blocks * FRAMES_PER_BLOCK), duration_ms=10_000.0, seed=seed)
    if kill_ms is not None:
        sc.events.append(FaultEvent(kill_ms, "kill", "primary"))
    return sc


def failover_consistency(seed: int, delayed_sends: bool, lag: int = 5000) -> ScenarioReport:
    """Kill the primary part-way through a stream with the secondaries held ``lag`` branches back."""
    kill = random.Random(seed).uniform(100.0, 250.0)
    return run_scenario(stream_scenario(seed, delayed_sends, lag, kill))


def failover_latency(seed: int, heartbeat_ms: float = 100.0, miss_threshold: int = 5,
                     count: int = 200, interval_ms: float = 10.0) -> ScenarioReport:
    """Ping the VM while its primary dies; the window is detection + promotion + rebind."""
    rng = random.Random(seed)
    kill = rng.uniform(300.0, 700.0)
    sc = Scenario(workload="pingserver", client=("ping", count, interval_ms),
                  heartbeat_ms=heartbeat_ms, miss_threshold=miss_threshold, seed=seed,
                  duration_ms=count * interval_ms + 5000.0)
    sc.events.append(FaultEvent(kill, "kill", "primary"))
    return run_scenario(sc)


def drift_bound(seed: int, throttle: bool = True, drift_max: int = 10_000,
                slowdown: float = 2.0, duration_ms: float = 400.0,
                workload: str = "emptyloop") -> ScenarioReport:
    """One secondary replays ``slowdown`` times slower than the primary records."""
    rng = random.Random(seed)
    slow = rng.choice([1, 2])
    sc = Scenario(workload=workload, client=("none",), drift_max=drift_max, throttle=throttle,
                  slowdown={slow: slowdown}, duration_ms=duration_ms, seed=seed,
                  rate=rng.choice([400.0, 500.0, 600.0]))
    return run_scenario(sc)


@dataclass
class LagPoint:
    lag: int
    median_rtt_ms: float
    stream_ms: float


def latency_vs_lag(lags=(0, 1000, 2000, 5000, 10_000), seed: int = 0, pings: int = 60,
                   interval_ms: float = 10.0) -> list:
    """Median ping RTT and stream completion time for each induced lag."""
    out = []
    for lag in lags:
        ping = run_scenario(Scenario(workload="pingserver", lag=lag, seed=seed,
                                     client=("ping", pings, interval_ms),
                                     duration_ms=pings * interval_ms + 2000.0))
        stream = run_scenario(stream_scenario(seed, True, lag))
        if ping.median_rtt is None or not stream.stream.completed:
            raise RuntimeError(f"lag {lag}: experiment did not complete")
        out.append(LagPoint(lag, ping.median_rtt, stream.stream.wall_ms))
    return out
