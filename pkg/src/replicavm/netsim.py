"""Discrete-event network world: one switch, latency-only links, observing clients.

Time is simulated milliseconds; nothing here reads the host clock, so every
run is reproducible from its seed.
"""

from __future__ import annotations

import heapq
import itertools
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

DEFAULT_LATENCY_MS = 1.0
DEFAULT_REBIND_MS = 50.0

_SEQ = struct.Struct("<Q")


class Simulator:
    """Single event queue; ties run in scheduling order."""

    def __init__(self):
        self.now = 0.0
        self._q: list = []
        self._seq = itertools.count()
        self.events = 0

    def at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._q, (max(t, self.now), next(self._seq), fn, args))

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        while self._q:
            t = self._q[0][0]
            if until is not None and t > until:
                self.now = until
                return
            _, _, fn, args = heapq.heappop(self._q)
            self.now = t
            fn(*args)
            self.events += 1
            if stop is not None and stop():
                return
        if until is not None:
            self.now = max(self.now, until)


@dataclass
class Delivery:
    sent: float
    arrived: float
    src: str
    dst: str
    endpoint: str
    payload: bytes


class VirtualSwitch:
    """Address table plus fixed-latency delivery.

    ``dst`` may be a bound address or an endpoint name.  Routing is decided
    at send time; a frame whose endpoint has detached by arrival is dropped.
    """

    def __init__(self, sim: Simulator, latency_ms: float = DEFAULT_LATENCY_MS,
                 rebind_ms: float = DEFAULT_REBIND_MS):
        self.sim = sim
        self.latency_ms = latency_ms
        self.rebind_ms = rebind_ms
        self.endpoints: dict = {}
        self.table: dict = {}
        self.delivery_log: list = []
        self.binding_history: list = []
        self.dropped = 0

    def attach(self, name: str, handler: Callable[[bytes, str], None]) -> None:
        self.endpoints[name] = handler

    def detach(self, name: str) -> None:
        self.endpoints.pop(name, None)

    def bind(self, addr: str, endpoint: str) -> None:
        self.table[addr] = endpoint
        self.binding_history.append((self.sim.now, addr, endpoint))

    def rebind(self, addr: str, endpoint: str, latency_ms: Optional[float] = None) -> float:
        """Move ``addr`` to ``endpoint`` after the rebind latency; returns the completion time."""
        delay = self.rebind_ms if latency_ms is None else latency_ms
        done = self.sim.now + delay
        self.sim.at(done, self.bind, addr, endpoint)
        return done

    def resolve(self, dst: str) -> Optional[str]:
        if dst in self.table:
            return self.table[dst]
        return dst if dst in self.endpoints else None

    def deliver(self, src: str, dst: str, payload: bytes) -> bool:
        endpoint = self.resolve(dst)
        if endpoint is None or endpoint not in self.endpoints:
            self.dropped += 1
            return False
        self.sim.schedule(self.latency_ms, self._arrive, self.sim.now, src, dst, endpoint, bytes(payload))
        return True

    def _arrive(self, sent: float, src: str, dst: str, endpoint: str, payload: bytes) -> None:
        handler = self.endpoints.get(endpoint)
        if handler is None:
            self.dropped += 1
            return
        self.delivery_log.append(Delivery(sent, self.sim.now, src, dst, endpoint, payload))
        handler(payload, src)


# -- clients ---------------------------------------------------------------------

class PingClient:
    """Sends sequence-numbered 16-byte probes and matches echoed replies."""

    def __init__(self, sim: Simulator, switch: VirtualSwitch, vm_addr: str, count: int,
                 interval_ms: float = 10.0, timeout_ms: float = 1000.0, start_ms: float = 0.0,
                 name: str = "client"):
        self.sim = sim
        self.switch = switch
        self.vm_addr = vm_addr
        self.count = count
        self.interval_ms = interval_ms
        self.timeout_ms = timeout_ms
        self.start_ms = start_ms
        self.name = name
        self.sent_at: dict = {}
        self.rtt: dict = {}
        self.replies: list = []  # receive times
        switch.attach(name, self._on_frame)
        sim.at(start_ms, self._probe, 0)

    def _probe(self, seq: int) -> None:
        self.sent_at[seq] = self.sim.now
        self.switch.deliver(self.name, self.vm_addr, _SEQ.pack(seq) + b"pingpong")
        if seq + 1 < self.count:
            self.sim.schedule(self.interval_ms, self._probe, seq + 1)

    def _on_frame(self, payload: bytes, src: str) -> None:
        if len(payload) < 8:
            return
        (seq,) = _SEQ.unpack_from(payload)
        if seq in self.sent_at and seq not in self.rtt:
            rtt = self.sim.now - self.sent_at[seq]
            if rtt <= self.timeout_ms:
                self.rtt[seq] = rtt
                self.replies.append(self.sim.now)

    @property
    def done(self) -> bool:
        last = self.start_ms + (self.count - 1) * self.interval_ms
        return len(self.sent_at) == self.count and self.sim.now >= last + self.timeout_ms

    def series(self) -> list:
        """Per-probe RTT in ms, None for a lost probe."""
        return [self.rtt.get(seq) for seq in range(self.count)]

    def lost(self) -> int:
        return sum(1 for r in self.series() if r is None)

    def unresponsive_window(self) -> float:
        """Longest stretch without a successful reply while probing."""
        end = self.start_ms + (self.count - 1) * self.interval_ms
        points = [self.start_ms] + [t for t in self.replies if t <= end + self.timeout_ms]
        if not self.replies or self.replies[-1] < end:
            points.append(min(self.sim.now, end + self.timeout_ms))
        return max((b - a for a, b in zip(points, points[1:])), default=0.0)

    def median_rtt(self) -> Optional[float]:
        vals = sorted(r for r in self.series() if r is not None)
        if not vals:
            return None
        mid = len(vals) // 2
        return vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2


@dataclass
class StreamResult:
    completed: bool
    stalled: bool
    regression_detected: bool
    frames: int
    bytes: int
    gaps: int
    wall_ms: Optional[float]


class StreamClient:
    """Receives a sequenced stream (each frame led by a u64 sequence number).

    A sequence number below the expected one is a rollback: the session is
    marked regressed and stalled.  A jump ahead is tolerated and counted as a
    gap (frames a retransmitting transport would recover).
    """

    def __init__(self, sim: Simulator, switch: VirtualSwitch, total_frames: int,
                 stall_timeout_ms: float = 5000.0, name: str = "client"):
        self.sim = sim
        self.total_frames = total_frames
        self.stall_timeout_ms = stall_timeout_ms
        self.name = name
        self.expected_seq = 0
        self.stalled = False
        self.regression_detected = False
        self.received = 0
        self.nbytes = 0
        self.gaps = 0
        self.first_ms: Optional[float] = None
        self.completed_ms: Optional[float] = None
        self.last_progress_ms = 0.0
        switch.attach(name, self._on_frame)

    def _on_frame(self, payload: bytes, src: str) -> None:
        if len(payload) < 8 or self.stalled:
            return
        (seq,) = _SEQ.unpack_from(payload)
        if self.first_ms is None:
            self.first_ms = self.sim.now
        if seq < self.expected_seq:
            self.regression_detected = True
            self.stalled = True
            return
        if seq > self.expected_seq:
            self.gaps += seq - self.expected_seq
        self.expected_seq = seq + 1
        self.received += 1
        self.nbytes += len(payload)
        self.last_progress_ms = self.sim.now
        if self.expected_seq >= self.total_frames and self.completed_ms is None:
            self.completed_ms = self.sim.now

    @property
    def completed(self) -> bool:
        return self.completed_ms is not None and not self.stalled

    def result(self) -> StreamResult:
        stalled = self.stalled or (
            not self.completed and self.sim.now - self.last_progress_ms > self.stall_timeout_ms)
        return StreamResult(self.completed, stalled, self.regression_detected, self.received,
                            self.nbytes, self.gaps, self.completed_ms)


# -- scenario files --------------------------------------------------------------

class ScenarioError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class FaultEvent:
    at_ms: float
    action: str   # "kill"
    target: str   # "primary" or "secondary"
    replica: Optional[int] = None


@dataclass
class Scenario:
    replicas: int = 3
    workload: str = "pingserver"
    param: Optional[int] = None
    delayed_sends: bool = True
    throttle: bool = True
    drift_max: int = 100_000
    drift_resume: Optional[int] = None
    lag: int = 0
    heartbeat_ms: float = 100.0
    miss_threshold: int = 5
    latency_ms: float = DEFAULT_LATENCY_MS
    rebind_ms: float = DEFAULT_REBIND_MS
    rate: float = 500.0
    quantum: int = 1000
    slowdown: dict = field(default_factory=dict)
    client: tuple = ("ping", 300, 10.0)
    duration_ms: float = 5000.0
    seed: int = 0
    respawn: bool = False
    events: list = field(default_factory=list)


_TIME = re.compile(r"^(\d+(?:\.\d+)?)(ms|s)$")
_AT = re.compile(r"^(.*?)\s*@\s*t\s*=\s*(\S+)$")


def parse_time(text: str) -> float:
    m = _TIME.match(text.strip())
    if not m:
        raise ValueError(f"bad time {text!r} (use e.g. 250ms or 2s)")
    value = float(m.group(1))
    return value * 1000.0 if m.group(2) == "s" else value


def _onoff(word: str) -> bool:
    if word not in ("on", "off"):
        raise ValueError(f"expected on/off, got {word!r}")
    return word == "on"


def parse_scenario(text: str) -> Scenario:
    """Parse the line-based scenario format; errors carry the line number."""
    sc = Scenario()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            _scenario_line(sc, line)
        except (ValueError, IndexError) as exc:
            raise ScenarioError(lineno, str(exc) or "malformed line") from None
    return sc


def _scenario_line(sc: Scenario, line: str) -> None:
    m = _AT.match(line)
    if m:
        words = m.group(1).split()
        at = parse_time(m.group(2))
        if not words or words[0] != "kill":
            raise ValueError(f"unknown action {words[0] if words else ''!r}")
        if words[1:] == ["primary"]:
            sc.events.append(FaultEvent(at, "kill", "primary"))
        elif len(words) == 3 and words[1] == "secondary":
            sc.events.append(FaultEvent(at, "kill", "secondary", int(words[2])))
        else:
            raise ValueError("expected 'kill primary' or 'kill secondary N'")
        return
    key, *args = line.split()
    ints = {"replicas": "replicas", "drift-max": "drift_max", "drift-resume": "drift_resume",
            "lag": "lag", "miss-threshold": "miss_threshold", "quantum": "quantum", "seed": "seed"}
    floats = {"heartbeat-ms": "heartbeat_ms", "latency-ms": "latency_ms",
              "rebind-ms": "rebind_ms", "rate": "rate"}
    switches = {"delayed-sends": "delayed_sends", "throttle": "throttle", "respawn": "respawn"}
    if key in ints:
        (value,) = args
        setattr(sc, ints[key], int(value))
    elif key in floats:
        (value,) = args
        setattr(sc, floats[key], float(value))
    elif key in switches:
        (value,) = args
        setattr(sc, switches[key], _onoff(value))
    elif key == "workload":
        if len(args) not in (1, 2):
            raise ValueError("usage: workload NAME [PARAM]")
        sc.workload = args[0]
        sc.param = int(args[1]) if len(args) == 2 else None
    elif key == "duration":
        (value,) = args
        sc.duration_ms = parse_time(value)
    elif key == "slowdown":
        rid, factor = args
        sc.slowdown[int(rid)] = float(factor)
    elif key == "client":
        kind, *rest = args
        if kind == "stream" and len(rest) == 1:
            sc.client = ("stream", int(rest[0]))
        elif kind == "ping" and len(rest) == 2:
            sc.client = ("ping", int(rest[0]), parse_time(rest[1]))
        elif kind == "none" and not rest:
            sc.client = ("none",)
        else:
            raise ValueError("usage: client stream FRAMES | client ping COUNT INTERVAL | client none")
    else:
        raise ValueError(f"unknown directive {key!r}")
