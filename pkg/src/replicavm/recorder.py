"""Live execution with logging of every non-deterministic input."""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Optional

from .devices import DeviceBus, DiskMode
from .guest import (
    MASK64, Epoch, GuestState, Stop, deliver_interrupt, epoch_of, execute,
    execute_stepwise, state_digest, step, EventKind,
)
from .log import FrameKind, LogHeader, LogWriter, RecordLog

DEFAULT_CHUNK = 256


class RecordAborted(Exception):
    """Writing the log failed; the partial log has no END frame."""


class SliceEnd(enum.Enum):
    BUDGET = "budget"
    BRANCH_LIMIT = "branch_limit"
    TIME = "time"
    HALTED = "halted"
    IDLE = "idle"  # waiting with nothing that could ever wake the guest


@dataclass
class RecordStats:
    steps: int = 0
    interrupts: list = field(default_factory=list)  # delivery epochs
    nd_events: list = field(default_factory=list)


class Recorder:
    """Drives a guest live and appends its non-determinism to ``log``.

    With ``log=None`` the same driver runs unrecorded (the baseline).  Device
    inputs are polled and pending interrupts delivered at step boundaries,
    at most ``chunk`` steps apart.
    """

    def __init__(self, state: GuestState, bus: DeviceBus, log: Optional[LogWriter] = None,
                 chunk: int = DEFAULT_CHUNK, trace: Optional[list] = None):
        self.state = state
        self.bus = bus
        self.clock = bus.clock
        self.log = log
        self.chunk = chunk
        self.trace = trace
        self.stats = RecordStats()
        self._rx: list = []
        self._rx_seq = itertools.count()
        bus.replaying = False
        bus.attach(state)
        bus.emit = self._emit if log is not None else None
        if bus.timer is not None and bus.timer.next_deadline is None:
            bus.timer.start(self.clock.now())

    @classmethod
    def start(cls, state: GuestState, bus: DeviceBus, stream=None, record: bool = True,
              **kw) -> "Recorder":
        """Take the disk snapshot (full-replay mode), write the header and
        return a recorder positioned at the first step."""
        log = None
        if record:
            header = LogHeader(int(bus.disk.mode), state.program.hash, state_digest(state))
            try:
                log = LogWriter(header, stream)
            except OSError as exc:
                raise RecordAborted(str(exc)) from exc
        rec = cls(state, bus, log, **kw)
        if bus.disk.mode == DiskMode.FULL_REPLAY:
            snap = bus.disk.snapshot or bus.disk.take_snapshot()
            rec._emit(FrameKind.SNAPSHOT_REF, epoch_of(state), snap.digest.to_bytes(8, "little"))
        return rec

    @property
    def steps(self) -> int:
        return self.stats.steps

    def post_rx(self, payload: bytes, at_ms: Optional[float] = None) -> None:
        """Queue an inbound frame; it reaches the NIC once the clock passes ``at_ms``."""
        t = self.clock.now() if at_ms is None else at_ms
        heapq.heappush(self._rx, (t, next(self._rx_seq), bytes(payload)))

    def _emit(self, kind, epoch: Epoch, payload: bytes) -> None:
        if self.log is None:
            return
        try:
            self.log.append(kind, epoch, payload)
        except OSError as exc:
            raise RecordAborted(str(exc)) from exc

    def _boundary(self) -> None:
        now = self.clock.now()
        bus = self.bus
        while self._rx and self._rx[0][0] <= now:
            _, _, payload = heapq.heappop(self._rx)
            if bus.nic.nic_rx(payload):
                self._emit(FrameKind.NET_RX, epoch_of(self.state), payload)
                bus.raise_irq(bus.nic.vector)
        if bus.timer is not None:
            v = bus.timer.timer_poll(now)
            if v is not None:
                bus.raise_irq(v)
        st = self.state
        if bus.pending and st.intr_enabled and not st.halted:
            vector = bus.next_irq()
            here = epoch_of(st)
            self._emit(FrameKind.INTERRUPT, here, bytes([vector]))
            deliver_interrupt(st, vector)
            self.stats.interrupts.append(here)

    def _next_wake(self) -> Optional[float]:
        if not self.state.intr_enabled:
            return None
        times = []
        timer = self.bus.timer
        if timer is not None and timer.enabled and timer.next_deadline is not None:
            times.append(timer.next_deadline)
        if self._rx:
            times.append(self._rx[0][0])
        return min(times) if times else None

    def _service(self) -> None:
        st = self.state
        if self.trace is not None:
            self.trace.append(epoch_of(st))
        before = epoch_of(st)
        _, ev = step(st, self.bus)
        if ev.kind is EventKind.ND_READ:
            self.stats.nd_events.append((before, ev))
        self.stats.steps += 1
        self.clock.advance(1)

    def run_slice(self, max_steps: int = MASK64, branch_limit: int = MASK64,
                  until_ms: Optional[float] = None) -> SliceEnd:
        """Execute until a budget, branch count, clock deadline or halt."""
        st = self.state
        budget_end = self.stats.steps + max_steps
        if self.trace is None:
            quiet = self.bus.quiet_in
            run = lambda s, n, lim: execute(s, n, lim, quiet)  # noqa: E731
        else:
            run = lambda s, n, lim: execute_stepwise(s, n, lim, self.trace)  # noqa: E731
        while True:
            self._boundary()
            if st.halted:
                return SliceEnd.HALTED
            if st.waiting:
                wake = self._next_wake()
                if wake is None:
                    if until_ms is not None:
                        self.clock.idle_until(until_ms)
                        return SliceEnd.TIME
                    return SliceEnd.IDLE
                if until_ms is not None and wake > until_ms:
                    self.clock.idle_until(until_ms)
                    return SliceEnd.TIME
                self.clock.idle_until(wake)
                continue
            if until_ms is not None and self.clock.now() >= until_ms:
                return SliceEnd.TIME
            left = budget_end - self.stats.steps
            if left <= 0:
                return SliceEnd.BUDGET
            n, why = run(st, min(self.chunk, left), branch_limit)
            self.stats.steps += n
            self.clock.advance(n)
            if why is Stop.SERVICE:
                self._service()
            elif why is Stop.BRANCH_LIMIT:
                return SliceEnd.BRANCH_LIMIT

    def finish(self) -> Optional[RecordLog]:
        """Append the END frame: final epoch, state digest and a halted flag.

        HALT leaves ip in place, so the flag tells the replayer whether END
        sits before or after the HALT at that epoch.
        """
        if self.log is None:
            return None
        st = self.state
        payload = state_digest(st).to_bytes(8, "little") + bytes([int(st.halted)])
        self._emit(FrameKind.END, epoch_of(st), payload)
        return RecordLog(self.log.header, list(self.log.frames))


@dataclass
class RecordResult:
    log: Optional[RecordLog]
    state: GuestState
    steps: int
    wall_ms: float
    end: SliceEnd
    stats: RecordStats


def record_run(state: GuestState, bus: DeviceBus, steps: Optional[int] = None,
               duration_ms: Optional[float] = None, stream=None, record: bool = True,
               rx: Optional[list] = None, chunk: int = DEFAULT_CHUNK,
               trace: Optional[list] = None) -> RecordResult:
    """Record ``state`` until ``steps`` executed, ``duration_ms`` elapsed or halt.

    ``rx`` is an optional list of ``(at_ms, payload)`` inbound frames, with
    times relative to the start of the run.
    """
    clock = bus.clock
    t0 = clock.now()
    rec = Recorder.start(state, bus, stream=stream, record=record, chunk=chunk, trace=trace)
    for at, payload in rx or ():
        rec.post_rx(payload, t0 + at)
    until = None if duration_ms is None else t0 + duration_ms
    max_steps = MASK64 if steps is None else steps
    end = rec.run_slice(max_steps=max_steps, until_ms=until)
    log = rec.finish()
    return RecordResult(log, state, rec.steps, clock.now() - t0, end, rec.stats)
