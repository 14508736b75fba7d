"""Primary/secondary replication over the simulated network.

The primary records in slices of at most ``quantum`` branches (or one
simulated millisecond), streams every log frame to the secondaries, and after
each slice promises a horizon: no later frame will carry a smaller branch
count.  Secondaries replay what they have and ack ``(lsn, nbranches)``.  The
primary pauses while drift exceeds ``drift_max`` and, with delayed sends on,
holds outbound packets until every in-sync secondary has replayed past them.
"""

from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .devices import BlockImage, DiskMode, TimerDevice, VirtualClock
from .guest import GuestState, state_digest
from .log import LogFrame, LogWriter, crc32, decode_frame, encode_frame
from .netsim import PingClient, Scenario, Simulator, StreamClient, StreamResult, VirtualSwitch
from .recorder import Recorder, SliceEnd
from .replayer import Divergence, ReplayError, Replayer, ReplayStatus, replay_bus
from .workloads import Workload

_ACK_BODY = struct.Struct("<QQ")
_CRC = struct.Struct("<I")
_HORIZON = struct.Struct("<Q")
ACK_SIZE = _ACK_BODY.size + _CRC.size  # 20

STALE_MS = 1000.0
ACK_INTERVAL_MS = 50.0
PAUSE_POLL_MS = 0.25


def encode_ack(lsn: int, nbranches: int) -> bytes:
    body = _ACK_BODY.pack(lsn, nbranches)
    return body + _CRC.pack(crc32(body))


def decode_ack(data: bytes) -> tuple[int, int]:
    if len(data) != ACK_SIZE:
        raise ValueError(f"ack must be {ACK_SIZE} bytes, got {len(data)}")
    (crc,) = _CRC.unpack_from(data, _ACK_BODY.size)
    if crc != crc32(data[:_ACK_BODY.size]):
        raise ValueError("bad ack crc")
    return _ACK_BODY.unpack_from(data)


@dataclass
class ReplicaSet:
    n: int = 3
    drift_max: int = 100_000
    drift_resume: Optional[int] = None
    delayed_sends: bool = True
    heartbeat_ms: float = 100.0
    miss_threshold: int = 5
    throttle: bool = True
    primary_id: int = 0

    def __post_init__(self):
        if not 2 <= self.n <= 8:
            raise ValueError(f"replica count must be 2..8, got {self.n}")
        if self.drift_resume is None:
            self.drift_resume = self.drift_max // 2
        if not self.drift_resume < self.drift_max:
            raise ValueError("drift_resume must be below drift_max")

    @property
    def secondary_ids(self) -> list:
        return [i for i in range(self.n) if i != self.primary_id]


class DriftGauge:
    """Primary-side view of how far the slowest in-sync secondary lags."""

    def __init__(self, stale_ms: float = STALE_MS, samples: Optional[list] = None):
        self.stale_ms = stale_ms
        self.acked: dict = {}  # sid -> (lsn, nbranches, received at)
        self.primary_nb = 0
        self.samples = samples if samples is not None else []

    def ack(self, sid: int, lsn: int, nbranches: int, now: float) -> None:
        old = self.acked.get(sid)
        if old is not None:
            lsn, nbranches = max(lsn, old[0]), max(nbranches, old[1])
        self.acked[sid] = (lsn, nbranches, now)

    def drop(self, sid: int) -> None:
        self.acked.pop(sid, None)

    def drift(self, now: float) -> int:
        worst = 0
        for lsn, nb, t in self.acked.values():
            # a stale ack says nothing about progress: assume the worst
            d = self.primary_nb if now - t > self.stale_ms else max(0, self.primary_nb - nb)
            worst = max(worst, d)
        return worst

    def min_lsn(self) -> Optional[int]:
        if not self.acked:
            return None
        return min(v[0] for v in self.acked.values())

    def sample(self, now: float) -> int:
        d = self.drift(now)
        self.samples.append((now, d))
        return d


class SendBuffer:
    """Outbound packets held until every secondary has replayed past them."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.queue: deque = deque()  # (payload, emission lsn, emission epoch)
        self.released = 0
        self.discarded = 0

    def buffer_send(self, payload: bytes, emission_lsn: int, epoch=None) -> None:
        self.queue.append((bytes(payload), emission_lsn, epoch))

    def release_ready(self, min_acked_lsn: Optional[int]) -> list:
        """Pop packets whose emission lsn is covered, in emission order.

        ``None`` means no secondary is tracked, so nothing can be rolled back.
        """
        out = []
        while self.queue and (not self.enabled or min_acked_lsn is None
                              or self.queue[0][1] <= min_acked_lsn):
            out.append(self.queue.popleft())
        self.released += len(out)
        return out

    def discard(self) -> int:
        n = len(self.queue)
        self.queue.clear()
        self.discarded += n
        return n

    def __len__(self) -> int:
        return len(self.queue)


class HeartbeatDetector:
    def __init__(self, period_ms: float, miss_threshold: int, start_ms: float = 0.0):
        self.period_ms = period_ms
        self.miss_threshold = miss_threshold
        self.start_ms = start_ms
        self.last: dict = {}

    def beat(self, rid: int, now: float) -> None:
        self.last[rid] = now

    def forget(self, rid: int) -> None:
        self.last.pop(rid, None)

    def failed(self, rid: int, now: float) -> bool:
        last = self.last.get(rid, self.start_ms)
        return now - last > self.period_ms * self.miss_threshold


@dataclass
class Replica:
    id: int
    role: str  # primary | secondary | promoting | dead
    state: GuestState
    rate: float
    replayer: Optional[Replayer] = None
    recorder: Optional[Recorder] = None
    alive: bool = True
    in_sync: bool = True
    finished: bool = False
    idle: bool = False
    scheduled: bool = False
    busy_until: float = 0.0
    term: int = 0

    @property
    def endpoint(self) -> str:
        return f"replica{self.id}"

    @property
    def steps(self) -> int:
        if self.replayer is not None:
            return self.replayer.stats.steps
        return self.recorder.steps if self.recorder is not None else 0


@dataclass
class Promotion:
    failed_ms: Optional[float]
    detected_ms: float
    live_ms: float = 0.0
    rebound_ms: float = 0.0
    old_primary: int = -1
    new_primary: int = -1
    primary_nb_at_failure: int = 0
    secondary_nb_at_failure: int = 0
    new_nb: int = 0
    rolled_back_outputs: int = 0

    @property
    def rollback_branches(self) -> int:
        return max(0, self.primary_nb_at_failure - self.new_nb)

    @property
    def promotion_ms(self) -> float:
        """Detection to address rebound."""
        return self.rebound_ms - self.detected_ms

    @property
    def failover_ms(self) -> Optional[float]:
        """Failure to address rebound."""
        return None if self.failed_ms is None else self.rebound_ms - self.failed_ms


class Cluster:
    """One recording primary and n-1 replaying secondaries on a :class:`Simulator`."""

    def __init__(self, sim: Simulator, switch: VirtualSwitch, rs: ReplicaSet, workload: Workload,
                 *, param: Optional[int] = None, rate: float = 500.0, quantum: int = 1000,
                 lag: int = 0, seed: int = 0, slowdown: Optional[dict] = None,
                 vm_addr: str = "vm", peer: str = "client", slice_ms: float = 1.0,
                 stale_ms: float = STALE_MS, respawn: bool = False,
                 disk_mode: DiskMode = DiskMode.FULL_REPLAY):
        self.sim = sim
        self.switch = switch
        self.rs = rs
        self.workload = workload
        self.rate = rate
        self.quantum = quantum
        self.lag = lag
        self.seed = seed
        self.slowdown = dict(slowdown or {})
        self.vm_addr = vm_addr
        self.peer = peer
        self.slice_ms = slice_ms
        self.stale_ms = stale_ms
        self.respawn = respawn
        self.latency_ms = switch.latency_ms
        if lag and lag >= rs.drift_resume:
            raise ValueError("induced lag must stay below drift_resume or the primary never resumes")
        self.rng = random.Random(seed)

        st, bus = workload.build(disk_mode, clock=VirtualClock(rate), seed=seed, param=param)
        self.timer_ms = bus.timer.period_ms if bus.timer is not None else None
        self.init = st.copy()
        rec = Recorder.start(st, bus)
        self.header = rec.log.header
        self.snapshot = bus.disk.snapshot
        self.disk_image = None if self.snapshot is not None else BlockImage(data=bus.disk.image.to_bytes())
        self.history: list = list(rec.log.frames)
        self._pumped_lsn = self.history[-1].lsn if self.history else 0

        self.term = 0
        self.drift_samples: list = []
        self.gauge = DriftGauge(stale_ms, self.drift_samples)
        self.sbuf = SendBuffer(rs.delayed_sends)
        self.paused = False
        self.pauses = 0
        self.paused_ms = 0.0
        self.released: list = []  # (time, emission lsn, min replayed lsn)
        self.discarded = 0
        self.divergences = 0
        self.promotions: list = []
        self.lost = False
        self.declared_dead: set = set()
        self._held: deque = deque()
        self._last_horizon = -1
        self._kill: Optional[tuple] = None

        primary = Replica(rs.primary_id, "primary", st, rate, recorder=rec)
        self.replicas: dict = {primary.id: primary}
        self.primary = primary
        self._wire_primary(primary)
        switch.bind(vm_addr, primary.endpoint)

        self.detector = HeartbeatDetector(rs.heartbeat_ms, rs.miss_threshold, sim.now)
        self._next_id = rs.n
        for sid in rs.secondary_ids:
            self._spawn_secondary(sid, catch_up=False)
        for r in list(self.replicas.values()):
            self._heartbeat(r)
        sim.schedule(rs.heartbeat_ms, self._coordinator_check)
        sim.schedule(0.0, self._primary_slice, self.term)

    # -- helpers -------------------------------------------------------------

    @property
    def secondaries(self) -> list:
        return [r for r in self.replicas.values() if r.role == "secondary" and r.alive]

    def _wire_primary(self, p: Replica) -> None:
        rec = p.recorder
        rec.log.subscribe(self._on_frame)
        rec.bus.nic.tx_sink = self._on_tx
        self.switch.attach(p.endpoint, lambda payload, src, p=p: self._on_rx(p, payload))

    def _on_rx(self, p: Replica, payload: bytes) -> None:
        if p is self.primary and p.alive and p.recorder is not None:
            p.recorder.post_rx(payload, at_ms=self.sim.now)

    def _on_frame(self, frame: LogFrame) -> None:
        self.history.append(frame)
        self._held.append((frame.epoch.nbranches, "frame", frame))

    def _on_tx(self, tx) -> None:
        if tx.replay_origin:
            return
        self.sbuf.buffer_send(tx.payload, self.primary.recorder.log.next_lsn, tx.epoch)

    def _send_msg(self, sec: Replica, t: float, kind: str, data: bytes) -> None:
        self.sim.at(t + self.latency_ms, self._on_msg, sec, self.term, kind, data)

    # -- primary -------------------------------------------------------------

    def _primary_slice(self, term: int) -> None:
        p = self.primary
        if term != self.term or not p.alive or p.finished or p.role != "primary":
            return
        now = self.sim.now
        rec = p.recorder
        st = p.state
        self.gauge.primary_nb = st.nbranches
        if self.rs.throttle:
            d = self.gauge.drift(now)
            if self.paused and d <= self.rs.drift_resume:
                self.paused = False
            elif not self.paused and d > self.rs.drift_max:
                self.paused = True
                self.pauses += 1
            if self.paused:
                self.gauge.sample(now)
                self.paused_ms += PAUSE_POLL_MS
                self.sim.schedule(PAUSE_POLL_MS, self._primary_slice, term)
                return
        clock = rec.bus.clock
        clock.idle_until(now)
        end = rec.run_slice(branch_limit=st.nbranches + self.quantum, until_ms=now + self.slice_ms)
        t_end = max(clock.now(), now)
        if end is SliceEnd.HALTED:
            rec.finish()
            p.finished = True
        self.gauge.primary_nb = st.nbranches
        self.gauge.sample(t_end)
        if st.nbranches > self._last_horizon:
            self._last_horizon = st.nbranches
            self._held.append((st.nbranches, "horizon", st.nbranches))
        self._pump(t_end)
        self._release(t_end)
        if not p.finished:
            nxt = t_end if t_end > now else now + self.slice_ms
            self.sim.at(nxt, self._primary_slice, term)

    def _pump(self, t: float) -> None:
        """Forward held stream messages once the primary is ``lag`` branches past them."""
        p = self.primary
        limit = p.state.nbranches
        flush = p.finished or p.state.halted
        while self._held and (flush or self._held[0][0] + self.lag <= limit):
            _, kind, item = self._held.popleft()
            if kind == "frame":
                data = encode_frame(item)
                self._pumped_lsn = item.lsn
            else:
                data = _HORIZON.pack(item)
            for sec in self.secondaries:
                self._send_msg(sec, t, kind, data)

    def _release(self, t: float) -> None:
        if not self.primary.alive:
            return
        min_lsn = self.gauge.min_lsn()
        ready = self.sbuf.release_ready(min_lsn)
        if not ready:
            return
        # independent of the gauge: what the secondaries have really replayed
        tracked = [s.replayer.consumed_lsn for s in self.secondaries if s.in_sync]
        actual = min(tracked) if tracked else None
        for payload, lsn, epoch in ready:
            self.released.append((t, lsn, actual))
            self.sim.at(t, self.switch.deliver, self.primary.endpoint, self.peer, payload)

    # -- secondaries -----------------------------------------------------------

    def _spawn_secondary(self, sid: int, catch_up: bool) -> Replica:
        st = self.init.copy()
        bus = replay_bus(self.header, disk_image=self._fresh_disk(), snapshot=self.snapshot)
        rp = Replayer(st, bus, snapshot=self.snapshot, seed=self.seed * 1000 + sid)
        rate = self.rate / self.slowdown.get(sid, 1.0)
        sec = Replica(sid, "secondary", st, rate, replayer=rp, in_sync=not catch_up,
                      term=self.term, busy_until=self.sim.now)
        self.replicas[sid] = sec
        for f in self.history:
            if f.lsn > self._pumped_lsn:
                break
            self._send_msg(sec, self.sim.now, "frame", encode_frame(f))
        if self._last_horizon >= 0 and not self._held:
            self._send_msg(sec, self.sim.now, "horizon", _HORIZON.pack(self._last_horizon))
        if not catch_up:
            self.gauge.ack(sid, 0, 0, self.sim.now)
        self.sim.schedule(ACK_INTERVAL_MS, self._ack_tick, sec)
        return sec

    def _fresh_disk(self):
        if self.disk_image is None:
            return None
        return BlockImage(data=self.disk_image.to_bytes())

    def _on_msg(self, sec: Replica, term: int, kind: str, data: bytes) -> None:
        if not sec.alive or sec.role != "secondary" or term != sec.term:
            return
        rp = sec.replayer
        if kind == "frame":
            frame, _ = decode_frame(data)
            if frame.lsn <= rp.received_lsn:
                return
            try:
                rp.feed(frame)
            except ReplayError:
                self._diverged(sec)
                return
        else:
            (nb,) = _HORIZON.unpack(data)
            rp.set_horizon(nb)
        self._wake(sec)

    def _wake(self, sec: Replica) -> None:
        if sec.scheduled or sec.finished:
            return
        sec.idle = False
        sec.scheduled = True
        self.sim.at(max(self.sim.now, sec.busy_until), self._secondary_slice, sec)

    def _secondary_slice(self, sec: Replica) -> None:
        sec.scheduled = False
        if not sec.alive or sec.role != "secondary":
            return
        rp = sec.replayer
        before = rp.stats.steps
        try:
            status = rp.advance(max(1, int(sec.rate * self.slice_ms)))
        except Divergence:
            self._diverged(sec)
            return
        used = rp.stats.steps - before
        t_end = self.sim.now + used / sec.rate
        sec.busy_until = t_end
        self._send_ack(sec, t_end)
        if status is ReplayStatus.DONE:
            sec.finished = True
        elif status is ReplayStatus.NEED_FRAMES:
            sec.idle = True
        else:
            sec.scheduled = True
            self.sim.at(t_end, self._secondary_slice, sec)

    def _send_ack(self, sec: Replica, t: float) -> None:
        rp = sec.replayer
        data = encode_ack(rp.consumed_lsn, rp.state.nbranches)
        self.sim.at(t + self.latency_ms, self._on_ack, self.term, sec.id, data)

    def _ack_tick(self, sec: Replica) -> None:
        if not sec.alive or sec.role != "secondary":
            return
        self._send_ack(sec, max(self.sim.now, sec.busy_until))
        self.sim.schedule(ACK_INTERVAL_MS, self._ack_tick, sec)

    def _on_ack(self, term: int, sid: int, data: bytes) -> None:
        if term != self.term or not self.primary.alive or self.primary.role != "primary":
            return
        sec = self.replicas.get(sid)
        if sec is None or sec.role != "secondary" or sid in self.declared_dead:
            return
        lsn, nb = decode_ack(data)
        pnb = self.primary.state.nbranches
        if not sec.in_sync:
            if nb + self.rs.drift_resume < pnb:
                return
            sec.in_sync = True
        self.gauge.primary_nb = pnb
        self.gauge.ack(sid, lsn, nb, self.sim.now)
        self.gauge.sample(self.sim.now)
        self._release(self.sim.now)

    def _diverged(self, sec: Replica) -> None:
        self.divergences += 1
        self._retire(sec)
        if self.respawn:
            self._respawn()

    def _retire(self, sec: Replica) -> None:
        sec.alive = False
        sec.role = "dead"
        self.gauge.drop(sec.id)
        self.detector.forget(sec.id)
        self.declared_dead.add(sec.id)

    def _respawn(self) -> Replica:
        sid = self._next_id
        self._next_id += 1
        sec = self._spawn_secondary(sid, catch_up=True)
        self._heartbeat(sec)
        return sec

    # -- failure detection and promotion --------------------------------------

    def _heartbeat(self, r: Replica) -> None:
        if not r.alive:
            return
        self.sim.schedule(self.latency_ms, self.detector.beat, r.id, self.sim.now + self.latency_ms)
        self.sim.schedule(self.rs.heartbeat_ms, self._heartbeat, r)

    def _coordinator_check(self) -> None:
        now = self.sim.now
        for r in list(self.replicas.values()):
            if r.id in self.declared_dead or r.role == "promoting":
                continue
            if self.detector.failed(r.id, now):
                if r is self.primary:
                    self.declared_dead.add(r.id)
                    self._promote(now)
                elif r.role == "secondary":
                    self._retire(r)
                    if self.respawn:
                        self._respawn()
        if not self.lost:
            self.sim.schedule(self.rs.heartbeat_ms, self._coordinator_check)

    def kill(self, rid: Optional[int] = None) -> None:
        """Crash a replica (the primary by default): it stops executing and beating."""
        r = self.primary if rid is None else self.replicas[rid]
        if not r.alive:
            return
        r.alive = False
        self.switch.detach(r.endpoint)
        if r is self.primary:
            self.discarded += self.sbuf.discard()
            self._held.clear()
            lag = {s.id: s.state.nbranches for s in self.secondaries}
            self._kill = (self.sim.now, r.state.nbranches, lag)

    def _promote(self, now: float) -> None:
        cands = [s for s in self.secondaries if s.id not in self.declared_dead]
        if not cands:
            self.lost = True
            return
        best = max(cands, key=lambda s: (s.replayer.received_lsn, -s.id))
        self.term += 1
        for s in cands:
            s.term = self.term
        rp = best.replayer
        before = rp.stats.steps
        try:
            while rp.advance() is ReplayStatus.BUDGET:
                pass
        except Divergence:
            self.divergences += 1
            self._retire(best)
            self._promote(now)
            return
        drain_ms = (rp.stats.steps - before) / best.rate
        best.role = "promoting"
        kill = self._kill
        promo = Promotion(
            failed_ms=kill[0] if kill else None, detected_ms=now,
            old_primary=self.primary.id, new_primary=best.id,
            primary_nb_at_failure=kill[1] if kill else self.primary.state.nbranches,
            secondary_nb_at_failure=kill[2].get(best.id, 0) if kill else 0)
        self.promotions.append(promo)
        self.sim.at(max(now, best.busy_until) + drain_ms, self._go_live, best, self.term, promo)

    def _go_live(self, best: Replica, term: int, promo: Promotion) -> None:
        now = self.sim.now
        rp = best.replayer
        st, bus = rp.state, rp.bus
        bus.replaying = False
        bus.source = None
        bus.pending.clear()
        bus.disk.discard_writes = False
        bus.clock = VirtualClock(self.rate, start_ms=now)
        bus.timer = TimerDevice(self.timer_ms) if self.timer_ms else None
        writer = LogWriter(self.header, first_lsn=rp.consumed_lsn + 1)
        self.history = list(rp.consumed)
        self._pumped_lsn = rp.consumed_lsn
        rec = Recorder(st, bus, writer)
        best.recorder = rec
        best.replayer = None
        best.role = "primary"
        best.rate = self.rate
        best.finished = rp.done
        self.primary = best
        promo.live_ms = now
        promo.new_nb = st.nbranches
        promo.rolled_back_outputs = sum(1 for _, lsn, _ in self.released if lsn > rp.consumed_lsn)

        self.sbuf = SendBuffer(self.rs.delayed_sends)
        self.gauge = DriftGauge(self.stale_ms, self.drift_samples)
        self.gauge.primary_nb = st.nbranches
        self._held.clear()
        self._last_horizon = st.nbranches
        self.paused = False
        self._wire_primary(best)
        promo.rebound_ms = self.switch.rebind(self.vm_addr, best.endpoint)

        for s in self.secondaries:
            if s.id in self.declared_dead:
                continue
            srp = s.replayer
            if srp.stats.steps > rp.stats.steps or srp.received_lsn > rp.consumed_lsn:
                # ran past the point the new primary continues from
                self._retire(s)
                if self.respawn:
                    self._respawn()
                continue
            for f in self.history:
                if f.lsn > srp.received_lsn:
                    self._send_msg(s, now, "frame", encode_frame(f))
            self._send_msg(s, now, "horizon", _HORIZON.pack(st.nbranches))
            if s.in_sync:
                self.gauge.ack(s.id, srp.consumed_lsn, srp.state.nbranches, now)
        self._kill = None
        if not best.finished:
            self.sim.at(now, self._primary_slice, term)

    # -- driving -------------------------------------------------------------

    def quiescent(self) -> bool:
        p = self.primary
        if self.lost:
            return True
        if not (p.finished and p.role == "primary"):
            return False
        return all(s.finished for s in self.secondaries) and not self.sbuf.queue

    def max_drift(self) -> int:
        return max((d for _, d in self.drift_samples), default=0)

    def mean_drift(self) -> float:
        if not self.drift_samples:
            return 0.0
        return sum(d for _, d in self.drift_samples) / len(self.drift_samples)


# -- scenarios -------------------------------------------------------------------

@dataclass
class ScenarioReport:
    scenario: Scenario
    end_ms: float
    promotions: list
    max_drift: int
    mean_drift: float
    pauses: int
    paused_ms: float
    primary_nbranches: int
    lost: bool
    divergences: int
    discarded: int
    released: int
    commit_violations: int
    converged: Optional[bool]
    stream: Optional[StreamResult] = None
    ping_rtt: Optional[list] = None
    drift_samples: list = field(default_factory=list)

    @property
    def median_rtt(self) -> Optional[float]:
        vals = sorted(r for r in (self.ping_rtt or []) if r is not None)
        if not vals:
            return None
        mid = len(vals) // 2
        return vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2

    @property
    def unresponsive_ms(self) -> Optional[float]:
        return getattr(self, "_unresponsive", None)


def build_cluster(sc: Scenario) -> tuple:
    """Simulator, switch, cluster and client for a parsed scenario."""
    from . import workloads

    sim = Simulator()
    switch = VirtualSwitch(sim, sc.latency_ms, sc.rebind_ms)
    rs = ReplicaSet(n=sc.replicas, drift_max=sc.drift_max, drift_resume=sc.drift_resume,
                    delayed_sends=sc.delayed_sends, heartbeat_ms=sc.heartbeat_ms,
                    miss_threshold=sc.miss_threshold, throttle=sc.throttle)
    wl = workloads.get(sc.workload)
    client = None
    kind = sc.client[0]
    if kind == "stream":
        client = StreamClient(sim, switch, sc.client[1])
    elif kind == "ping":
        client = PingClient(sim, switch, "vm", sc.client[1], sc.client[2], start_ms=1.0)
    cluster = Cluster(sim, switch, rs, wl, param=sc.param, rate=sc.rate, quantum=sc.quantum,
                      lag=sc.lag, seed=sc.seed, slowdown=sc.slowdown, respawn=sc.respawn)
    for ev in sc.events:
        if ev.action == "kill":
            rid = None if ev.target == "primary" else ev.replica
            if rid is not None and rid not in cluster.replicas:
                raise ValueError(f"no replica {rid}")
            sim.at(ev.at_ms, cluster.kill, rid)
    return sim, switch, cluster, client


def run_scenario(sc: Scenario) -> ScenarioReport:
    sim, switch, cluster, client = build_cluster(sc)

    settle = 10 * sc.latency_ms
    quiet_since = [None]

    def finished() -> bool:
        if cluster.lost:
            return True
        if isinstance(client, PingClient):
            return client.done
        if isinstance(client, StreamClient):
            if client.stalled:
                return True
            if not client.completed:
                return False
        # let in-flight deliveries land before calling it a day
        if not cluster.quiescent():
            quiet_since[0] = None
            return False
        if quiet_since[0] is None:
            quiet_since[0] = sim.now
        return sim.now >= quiet_since[0] + settle

    sim.run(until=sc.duration_ms, stop=finished)
    violations = sum(1 for _, lsn, actual in cluster.released
                     if sc.delayed_sends and actual is not None and lsn > actual)
    converged = None
    p = cluster.primary
    if p.finished and not cluster.lost:
        digest = state_digest(p.state)
        secs = cluster.secondaries
        converged = all(s.finished and s.replayer.verified and state_digest(s.state) == digest
                        for s in secs)
    report = ScenarioReport(
        scenario=sc, end_ms=sim.now, promotions=list(cluster.promotions),
        max_drift=cluster.max_drift(), mean_drift=cluster.mean_drift(), pauses=cluster.pauses,
        paused_ms=cluster.paused_ms, primary_nbranches=p.state.nbranches, lost=cluster.lost,
        divergences=cluster.divergences, discarded=cluster.discarded,
        released=len(cluster.released), commit_violations=violations, converged=converged,
        drift_samples=list(cluster.drift_samples))
    if isinstance(client, StreamClient):
        report.stream = client.result()
    elif isinstance(client, PingClient):
        report.ping_rtt = client.series()
        report._unresponsive = client.unresponsive_window()
    return report
