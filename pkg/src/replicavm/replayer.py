"""Log-driven re-execution with exact-epoch interrupt injection.

Asynchronous frames (interrupts, received packets, END) are applied at a step
boundary whose epoch equals the frame's.  To get there the replayer arms an
emulated branch-counter overflow ``SLACK`` branches before the target, since
the notification may arrive up to ``SLACK`` branches late, then single-steps
until the epoch matches exactly.
"""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .devices import DeviceBus, DiskDevice, DiskMode, NeedFrames, NicDevice, Snapshot
from .guest import (
    MASK64, Epoch, GuestState, Stop, deliver_interrupt, epoch_of, execute,
    execute_stepwise, state_digest, step,
)
from .log import ASYNC_KINDS, FrameKind, LogFrame, RecordLog

SLACK = 128
MAX_SINGLE_STEPS = 10_000_000
DEFAULT_CHUNK = 4096


class Divergence(Exception):
    def __init__(self, lsn: int, expected, actual: Epoch, detail: str = ""):
        msg = f"divergence at lsn {lsn}, expected epoch {tuple(expected) if expected else None}, at epoch {tuple(actual)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.lsn = lsn
        self.expected = expected
        self.actual = actual


class ReplayError(Exception):
    pass


class OverflowEmulator:
    """Imprecise branch-counter overflow: fires up to ``slack`` branches late."""

    def __init__(self, rng: random.Random, slack: int = SLACK):
        self.rng = rng
        self.slack = slack
        self.armed_target: Optional[int] = None
        self.overshoot = 0

    def arm(self, target_nbranches: int, current_nbranches: int) -> int:
        """Arm for an injection at ``target_nbranches``; returns the branch
        count at which the notification fires.

        Arming happens ``slack`` branches early so even a maximal overshoot
        lands at or before the target.  If the guest is already inside that
        window, arming is at the current count and the notification is
        clamped to the target.
        """
        armed = max(target_nbranches - self.slack, current_nbranches)
        self.armed_target = armed
        self.overshoot = self.rng.randint(0, self.slack)
        return min(armed + self.overshoot, target_nbranches)


class ReplayStatus(enum.Enum):
    DONE = "done"
    NEED_FRAMES = "need_frames"
    BUDGET = "budget"


@dataclass
class ReplayStats:
    batch_steps: int = 0
    single_steps: int = 0
    injections: list = field(default_factory=list)  # (lsn, delivery epoch, armed, fired)

    @property
    def steps(self) -> int:
        return self.batch_steps + self.single_steps


class Replayer:
    """Streaming replayer.

    Frames arrive through :meth:`feed` in LSN order.  Without a pending frame
    the guest may still run while its branch count is below ``horizon``: the
    primary promises no future frame carries a smaller branch count.
    """

    def __init__(self, state: GuestState, bus: DeviceBus, snapshot: Optional[Snapshot] = None,
                 seed: int = 0, trace: Optional[list] = None, chunk: int = DEFAULT_CHUNK,
                 max_single_steps: int = MAX_SINGLE_STEPS):
        self.state = state
        self.bus = bus
        self.snapshot = snapshot
        self.trace = trace
        self.chunk = chunk
        self.max_single_steps = max_single_steps
        self.emulator = OverflowEmulator(random.Random(seed))
        self.frames: deque = deque()
        self.consumed_lsn = 0
        self.consumed: list = []
        self.horizon: Optional[int] = None
        self.done = False
        self.verified: Optional[bool] = None
        self.stats = ReplayStats()
        self._armed: Optional[tuple] = None
        self._window = 0
        bus.replaying = True
        bus.emit = None
        bus.source = self._take
        bus.pending.clear()
        bus.attach(state)

    # -- cursor ------------------------------------------------------------

    def feed(self, frame: LogFrame) -> None:
        last = self.frames[-1].lsn if self.frames else self.consumed_lsn
        if frame.lsn != last + 1:
            raise ReplayError(f"frame lsn {frame.lsn} out of order after {last}")
        self.frames.append(frame)

    def feed_many(self, frames) -> None:
        for f in frames:
            self.feed(f)

    @property
    def received_lsn(self) -> int:
        return self.frames[-1].lsn if self.frames else self.consumed_lsn

    def set_horizon(self, nbranches: int) -> None:
        if self.horizon is None or nbranches > self.horizon:
            self.horizon = nbranches

    def _pop(self) -> LogFrame:
        f = self.frames.popleft()
        self.consumed_lsn = f.lsn
        self.consumed.append(f)
        self._armed = None
        return f

    def _divergence(self, frame: Optional[LogFrame], detail: str = "") -> Divergence:
        lsn = frame.lsn if frame else self.consumed_lsn + 1
        return Divergence(lsn, frame.epoch if frame else None, epoch_of(self.state), detail)

    def _take(self, kind: FrameKind, epoch: Epoch) -> bytes:
        """Bus callback: the instruction at ``epoch`` needs a ``kind`` frame."""
        f = self.frames[0] if self.frames else None
        if f is None:
            raise NeedFrames()
        if f.kind != kind or f.epoch != epoch:
            raise self._divergence(f, f"{kind.name} consumed, log has {f.kind.name}")
        return self._pop().payload

    # -- execution ---------------------------------------------------------

    def _service(self) -> bool:
        """Execute the I/O instruction at ip; False if its frame is missing."""
        st = self.state
        before = epoch_of(st)
        try:
            step(st, self.bus)
        except NeedFrames:
            return False
        if self.trace is not None:
            self.trace.append(before)
        self.stats.batch_steps += 1
        return True

    def _run(self, budget: int, branch_limit: int) -> Optional[Stop]:
        """Batch execution; returns None when a frame is missing."""
        if self.trace is None:
            n, why = execute(self.state, min(budget, self.chunk), branch_limit, self.bus.quiet_in)
        else:
            n, why = execute_stepwise(self.state, min(budget, self.chunk), branch_limit, self.trace)
        self.stats.batch_steps += n
        if why is Stop.SERVICE and not self._service():
            return None
        return why

    def _single_step(self, frame: LogFrame, budget: int, force: bool = False) -> None:
        st = self.state
        target = frame.epoch
        for _ in range(budget):
            cur = epoch_of(st)
            if cur == target and not force:
                return
            if st.nbranches > target.nbranches:
                raise self._divergence(frame, "branch count passed target")
            if st.halted or st.waiting:
                raise self._divergence(frame, "guest stopped before target")
            if self._window >= self.max_single_steps:
                raise self._divergence(frame, "single-step window exhausted")
            if self.trace is not None:
                self.trace.append(cur)
            step(st, self.bus)
            self._window += 1
            self.stats.single_steps += 1

    def _apply(self, frame: LogFrame) -> None:
        st = self.state
        if frame.kind == FrameKind.INTERRUPT:
            if not st.intr_enabled:
                raise self._divergence(frame, "interrupts disabled at injection")
            armed, fire = self._armed[1:] if self._armed is not None else (None, None)
            self.stats.injections.append((frame.lsn, epoch_of(st), armed, fire))
            deliver_interrupt(st, frame.payload[0])
        elif frame.kind == FrameKind.NET_RX:
            self.bus.nic.nic_rx(frame.payload)
        elif frame.kind == FrameKind.SNAPSHOT_REF:
            if self.snapshot is None or self.snapshot.digest != frame.value:
                raise ReplayError("disk snapshot does not match the log")
        elif frame.kind == FrameKind.END:
            self.verified = state_digest(st) == int.from_bytes(frame.payload[:8], "little")
            self.done = True
        self._pop()

    def advance(self, max_steps: int = MASK64) -> ReplayStatus:
        st = self.state
        start = self.stats.steps
        while True:
            if self.done:
                return ReplayStatus.DONE
            budget = max_steps - (self.stats.steps - start)
            if budget <= 0:
                return ReplayStatus.BUDGET
            f = self.frames[0] if self.frames else None
            if f is None:
                if (self.horizon is None or st.halted or st.waiting
                        or st.nbranches >= self.horizon):
                    return ReplayStatus.NEED_FRAMES
                if self._run(budget, self.horizon) is None:
                    return ReplayStatus.NEED_FRAMES
                continue

            if f.kind not in ASYNC_KINDS:
                # the next instruction that consumes input must sit at f.epoch
                if st.halted or st.waiting or st.nbranches > f.epoch.nbranches:
                    raise self._divergence(f, f"{f.kind.name} never consumed")
                why = self._run(budget, f.epoch.nbranches + 1)
                if why is Stop.BRANCH_LIMIT:
                    raise self._divergence(f, f"{f.kind.name} never consumed")
                continue

            if epoch_of(st) == f.epoch:
                if f.kind == FrameKind.END and f.payload[8:9] == b"\x01" and not st.halted:
                    self._single_step(f, 1, force=True)
                    continue
                self._apply(f)
                continue
            if st.halted or st.waiting or st.nbranches > f.epoch.nbranches:
                raise self._divergence(f, "target epoch unreachable")
            if self._armed is None:
                fire = self.emulator.arm(f.epoch.nbranches, st.nbranches)
                self._armed = (f.lsn, self.emulator.armed_target, fire)
                self._window = 0
            fire = self._armed[2]
            if st.nbranches < fire:
                why = self._run(budget, fire)
                if why is None:
                    raise self._divergence(f, "input consumed before injection")
            else:
                self._single_step(f, budget)


@dataclass
class ReplayResult:
    state: GuestState
    verified: bool
    truncated: bool
    stats: ReplayStats
    bus: DeviceBus


def replay_bus(log_header, disk_image=None, snapshot: Optional[Snapshot] = None,
               nic: Optional[NicDevice] = None) -> DeviceBus:
    """Devices for the replay side.

    Full-replay: the disk is a fresh overlay on the recorded snapshot.
    Output-replay: reads come from the log and ``disk_image`` is never written.
    """
    mode = DiskMode(log_header.disk_mode)
    if mode == DiskMode.FULL_REPLAY:
        if snapshot is None:
            raise ReplayError("full-replay log needs the disk snapshot")
        disk = DiskDevice(snapshot.fork(), mode)
        disk.snapshot = snapshot
    else:
        disk = DiskDevice(disk_image, mode)
        disk.discard_writes = True
    return DeviceBus(disk=disk, nic=nic)


def replay_run(log: RecordLog, state: GuestState, disk_image=None,
               snapshot: Optional[Snapshot] = None, seed: int = 0,
               trace: Optional[list] = None, bus: Optional[DeviceBus] = None) -> ReplayResult:
    """Replay a complete log from ``state`` (the recorded initial state)."""
    header = log.header
    if header.program_hash != state.program.hash:
        raise ReplayError("program does not match the log")
    if header.state_digest != state_digest(state):
        raise ReplayError("initial state does not match the log")
    if bus is None:
        bus = replay_bus(header, disk_image, snapshot)
    rp = Replayer(state, bus, snapshot=snapshot, seed=seed, trace=trace)
    rp.feed_many(log.frames)
    status = rp.advance()
    truncated = not log.complete
    if status is not ReplayStatus.DONE and not truncated:
        raise ReplayError(f"replay stopped early: {status.value}")
    return ReplayResult(state, bool(rp.verified), truncated, rp.stats, bus)
