"""Emulated devices: disk (with copy-on-write snapshots), timer and NIC.

Port map (bit-exact):

====  ====  ==========================================================
port  dir   meaning
====  ====  ==========================================================
0     OUT   disk block number
1     OUT   disk buffer address (guest word address, 512 words/block)
2     OUT   disk command: 1 = read, 2 = write; ``| 4`` = interrupt on done
3     IN    disk status of last command (0 ok, 1 bad block, 2 bad
            address, 3 bad command)
4     IN    NIC rx: next 8 bytes of the head frame, little-endian,
            zero padded
4     OUT   NIC tx: append the word as 8 little-endian bytes
5     IN    NIC rx status: bytes left in the head frame (0 = empty)
5     OUT   NIC transmit pending frame; nonzero value requests a
            tx-complete interrupt
6     OUT   timer control: 0 disables, nonzero enables
7     IN    host entropy (non-deterministic, logged)
====  ====  ==========================================================

Interrupt vectors: 0 timer, 1 NIC (rx and tx-complete), 2 disk.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .guest import MASK64, MEM_WORDS, Epoch, GuestState
from .log import FrameKind

BLOCK_SIZE = 4096
BLOCK_WORDS = BLOCK_SIZE // 8
MAX_IMAGE_BYTES = 16 * 1024 * 1024
MAX_FRAME = 1500

PORT_DISK_BLOCK = 0
PORT_DISK_ADDR = 1
PORT_DISK_CMD = 2
PORT_DISK_STATUS = 3
PORT_NIC_DATA = 4
PORT_NIC_CTRL = 5
PORT_TIMER = 6
PORT_ENTROPY = 7

VEC_TIMER = 0
VEC_NIC = 1
VEC_DISK = 2

DISK_READ = 1
DISK_WRITE = 2
DISK_IRQ = 4

STATUS_OK = 0
STATUS_BAD_BLOCK = 1
STATUS_BAD_ADDR = 2
STATUS_BAD_CMD = 3

_BLOCK = struct.Struct(f"<{BLOCK_WORDS}Q")
_OVERLAY_KEY = struct.Struct("<Q")


class DiskMode(enum.IntEnum):
    FULL_REPLAY = 0
    OUTPUT_REPLAY = 1

    @classmethod
    def parse(cls, text: str) -> "DiskMode":
        try:
            return {"full": cls.FULL_REPLAY, "output": cls.OUTPUT_REPLAY}[text]
        except KeyError:
            raise ValueError(f"disk mode must be 'full' or 'output', not {text!r}") from None


# -- block storage -------------------------------------------------------------

class BlockImage:
    """Flat image of 4096-byte blocks held in memory."""

    def __init__(self, nblocks: int = 0, data: Optional[bytes] = None):
        if data is not None:
            if len(data) % BLOCK_SIZE:
                raise ValueError("image size is not a multiple of the block size")
            self._buf = bytearray(data)
        else:
            self._buf = bytearray(nblocks * BLOCK_SIZE)
        if len(self._buf) > MAX_IMAGE_BYTES:
            raise ValueError("image larger than 16 MiB")

    @classmethod
    def from_file(cls, path) -> "BlockImage":
        with open(path, "rb") as fh:
            return cls(data=fh.read())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self._buf)

    @property
    def nblocks(self) -> int:
        return len(self._buf) // BLOCK_SIZE

    def read_block(self, n: int) -> bytes:
        return bytes(self._buf[n * BLOCK_SIZE:(n + 1) * BLOCK_SIZE])

    def write_block(self, n: int, data: bytes) -> None:
        self._buf[n * BLOCK_SIZE:(n + 1) * BLOCK_SIZE] = data

    def to_bytes(self) -> bytes:
        return bytes(self._buf)

    def digest(self) -> int:
        return int.from_bytes(hashlib.blake2b(self._buf, digest_size=8).digest(), "little")


class CowImage:
    """Copy-on-write view: reads fall through to ``base``, writes stay in the overlay."""

    def __init__(self, base: BlockImage, overlay: Optional[dict] = None):
        self.base = base
        self.overlay = dict(overlay or {})

    @property
    def nblocks(self) -> int:
        return self.base.nblocks

    def read_block(self, n: int) -> bytes:
        data = self.overlay.get(n)
        return data if data is not None else self.base.read_block(n)

    def write_block(self, n: int, data: bytes) -> None:
        self.overlay[n] = bytes(data)

    def to_bytes(self) -> bytes:
        return b"".join(self.read_block(i) for i in range(self.nblocks))

    def save_overlay(self, path) -> None:
        with open(path, "wb") as fh:
            for n in sorted(self.overlay):
                fh.write(_OVERLAY_KEY.pack(n))
                fh.write(self.overlay[n])

    @staticmethod
    def load_overlay(path) -> dict:
        with open(path, "rb") as fh:
            data = fh.read()
        rec = _OVERLAY_KEY.size + BLOCK_SIZE
        if len(data) % rec:
            raise ValueError("truncated overlay file")
        out = {}
        for off in range(0, len(data), rec):
            (n,) = _OVERLAY_KEY.unpack_from(data, off)
            out[n] = data[off + _OVERLAY_KEY.size:off + rec]
        return out


@dataclass
class Snapshot:
    """Frozen base image taken at record start."""

    base: BlockImage
    digest: int = 0

    def __post_init__(self):
        if not self.digest:
            self.digest = self.base.digest()

    def fork(self) -> CowImage:
        return CowImage(self.base)


# -- devices -----------------------------------------------------------------

@dataclass
class DiskCommand:
    block: int
    address: int
    op: int
    irq: bool = False


@dataclass
class DiskResult:
    status: int
    words: Optional[tuple] = None
    data: Optional[bytes] = None
    irq: bool = False


class DiskDevice:
    def __init__(self, image=None, mode: DiskMode = DiskMode.FULL_REPLAY):
        self.image = image if image is not None else BlockImage(0)
        self.mode = DiskMode(mode)
        self.snapshot: Optional[Snapshot] = None
        self.block = 0
        self.address = 0
        self.status = STATUS_OK
        # replay side of an output-replayed disk: the image is never touched
        self.discard_writes = False

    def take_snapshot(self) -> Snapshot:
        """Freeze the current contents; later writes go to a private overlay."""
        if isinstance(self.image, CowImage):
            base = BlockImage(data=self.image.to_bytes())
        else:
            base = self.image
        self.snapshot = Snapshot(base)
        self.image = self.snapshot.fork()
        return self.snapshot

    def check(self, cmd: DiskCommand) -> int:
        if cmd.op not in (DISK_READ, DISK_WRITE):
            return STATUS_BAD_CMD
        if cmd.block >= self.image.nblocks:
            return STATUS_BAD_BLOCK
        if cmd.address + BLOCK_WORDS > MEM_WORDS:
            return STATUS_BAD_ADDR
        return STATUS_OK

    def disk_io(self, cmd: DiskCommand, mem: list, read_data: Optional[bytes] = None) -> DiskResult:
        """Run one command against guest memory ``mem``.

        ``read_data`` replaces the image contents for a read; the replayer
        passes the logged payload of an output-replayed disk this way.
        """
        status = self.check(cmd)
        self.status = status
        if status != STATUS_OK:
            return DiskResult(status, irq=cmd.irq)
        if cmd.op == DISK_READ:
            data = read_data if read_data is not None else self.image.read_block(cmd.block)
            words = _BLOCK.unpack(data)
            mem[cmd.address:cmd.address + BLOCK_WORDS] = words
            return DiskResult(status, words, data, cmd.irq)
        words = mem[cmd.address:cmd.address + BLOCK_WORDS]
        if not self.discard_writes:
            self.image.write_block(cmd.block, _BLOCK.pack(*words))
        return DiskResult(status, irq=cmd.irq)


class TimerDevice:
    def __init__(self, period_ms: float, vector: int = VEC_TIMER, enabled: bool = True):
        if period_ms <= 0:
            raise ValueError("timer period must be positive")
        self.period_ms = period_ms
        self.vector = vector
        self.enabled = enabled
        self.next_deadline: Optional[float] = None

    def start(self, now_ms: float) -> None:
        self.next_deadline = now_ms + self.period_ms

    def timer_poll(self, now_ms: float) -> Optional[int]:
        """At most one request per call; each elapsed period yields one request."""
        if self.next_deadline is None:
            self.start(now_ms)
            return None
        if now_ms >= self.next_deadline:
            self.next_deadline += self.period_ms
            return self.vector if self.enabled else None
        return None


@dataclass
class TxFrame:
    payload: bytes
    epoch: Epoch
    replay_origin: bool = False


class NicDevice:
    def __init__(self, vector: int = VEC_NIC):
        self.vector = vector
        self.rx_queue: deque = deque()
        self._rx_off = 0
        self.tx_buf = bytearray()
        self.dropped = 0
        self.sent: list = []
        self.tx_sink: Optional[Callable[[TxFrame], None]] = None

    def nic_rx(self, frame: bytes) -> bool:
        if len(frame) > MAX_FRAME:
            self.dropped += 1
            return False
        self.rx_queue.append(bytes(frame))
        return True

    def _head(self) -> Optional[bytes]:
        while self.rx_queue and self._rx_off >= len(self.rx_queue[0]):
            self.rx_queue.popleft()
            self._rx_off = 0
        return self.rx_queue[0] if self.rx_queue else None

    def rx_status(self) -> int:
        head = self._head()
        return 0 if head is None else len(head) - self._rx_off

    def rx_word(self) -> int:
        head = self._head()
        if head is None:
            return 0
        chunk = head[self._rx_off:self._rx_off + 8]
        self._rx_off += len(chunk)
        return int.from_bytes(chunk, "little")

    def tx_word(self, value: int) -> None:
        self.tx_buf += (value & MASK64).to_bytes(8, "little")

    def nic_tx(self, epoch: Epoch, replay_origin: bool = False) -> Optional[TxFrame]:
        payload = bytes(self.tx_buf)
        self.tx_buf.clear()
        if len(payload) > MAX_FRAME:
            self.dropped += 1
            return None
        frame = TxFrame(payload, epoch, replay_origin)
        self.sent.append(frame)
        if self.tx_sink is not None:
            self.tx_sink(frame)
        return frame

    def state(self) -> tuple:
        return (tuple(self.rx_queue), self._rx_off, bytes(self.tx_buf))


# -- clocks ----------------------------------------------------------------------

class RealClock:
    """Host wall clock in milliseconds."""

    def now(self) -> float:
        return time.monotonic() * 1000.0

    def advance(self, steps: int) -> None:
        pass

    def idle_until(self, t_ms: float) -> None:
        delay = t_ms - self.now()
        if delay > 0:
            time.sleep(delay / 1000.0)


class VirtualClock:
    """Simulated clock: time moves only with executed steps or idling."""

    def __init__(self, steps_per_ms: float = 500.0, start_ms: float = 0.0):
        self.steps_per_ms = steps_per_ms
        self.t = start_ms

    def now(self) -> float:
        return self.t

    def advance(self, steps: int) -> None:
        self.t += steps / self.steps_per_ms

    def idle_until(self, t_ms: float) -> None:
        if t_ms > self.t:
            self.t = t_ms


# -- bus ---------------------------------------------------------------------

class NeedFrames(Exception):
    """A replay-side device needs a log frame that has not arrived yet."""


class DeviceBus:
    """Routes guest port I/O to the devices and collects interrupt requests.

    Live mode: device inputs that the guest cannot reproduce on its own are
    handed to ``emit(kind, epoch, payload)``.  Replay mode: those inputs are
    pulled from ``source(kind, epoch)`` instead, the timer is silent and
    device interrupt requests are dropped (interrupts come from the log).
    """

    def __init__(self, disk: Optional[DiskDevice] = None, nic: Optional[NicDevice] = None,
                 timer: Optional[TimerDevice] = None, clock=None, seed: int = 0):
        self.disk = disk if disk is not None else DiskDevice()
        self.nic = nic if nic is not None else NicDevice()
        self.timer = timer
        self.clock = clock if clock is not None else RealClock()
        self.rng = random.Random(seed)
        self.guest: Optional[GuestState] = None
        self.replaying = False
        self.emit: Optional[Callable] = None
        self.source: Optional[Callable] = None
        self.pending: set = set()

    def attach(self, state: GuestState) -> None:
        self.guest = state

    def raise_irq(self, vector: int) -> None:
        if not self.replaying:
            self.pending.add(vector)

    def next_irq(self) -> Optional[int]:
        if not self.pending:
            return None
        v = min(self.pending)
        self.pending.discard(v)
        return v

    def _nd_value(self, kind, epoch: Epoch, live: Callable[[], int]) -> int:
        if self.replaying:
            return int.from_bytes(self.source(kind, epoch), "little")
        value = live() & MASK64
        if self.emit is not None:
            self.emit(kind, epoch, value.to_bytes(8, "little"))
        return value

    # PortIO
    def rdtsc(self, epoch: Epoch) -> int:
        return self._nd_value(FrameKind.ND_VALUE, epoch, lambda: int(self.clock.now() * 1e6))

    def port_in(self, port: int, epoch: Epoch) -> tuple[int, bool]:
        if port == PORT_ENTROPY:
            return self._nd_value(FrameKind.ND_VALUE, epoch, lambda: self.rng.getrandbits(64)), True
        if port == PORT_DISK_STATUS:
            return self.disk.status, False
        if port == PORT_NIC_DATA:
            return self.nic.rx_word(), False
        if port == PORT_NIC_CTRL:
            return self.nic.rx_status(), False
        return 0, False

    def quiet_in(self, port: int) -> Optional[int]:
        """Device-port read for the batch interpreter; None for logged ports."""
        if port == PORT_ENTROPY:
            return None
        return self.port_in(port, None)[0]

    def port_out(self, port: int, value: int, epoch: Epoch) -> None:
        if port == PORT_DISK_BLOCK:
            self.disk.block = value
        elif port == PORT_DISK_ADDR:
            self.disk.address = value
        elif port == PORT_DISK_CMD:
            self._disk_command(value, epoch)
        elif port == PORT_NIC_DATA:
            self.nic.tx_word(value)
        elif port == PORT_NIC_CTRL:
            self.nic.nic_tx(epoch, replay_origin=self.replaying)
            if value:
                self.raise_irq(self.nic.vector)
        elif port == PORT_TIMER:
            if self.timer is not None:
                self.timer.enabled = bool(value)

    def _disk_command(self, value: int, epoch: Epoch) -> None:
        disk = self.disk
        cmd = DiskCommand(disk.block, disk.address, value & 3, bool(value & DISK_IRQ))
        output_mode = disk.mode == DiskMode.OUTPUT_REPLAY
        read_data = None
        if cmd.op == DISK_READ and output_mode and disk.check(cmd) == STATUS_OK and self.replaying:
            read_data = self.source(FrameKind.DISK_READ, epoch)
        result = disk.disk_io(cmd, self.guest.mem, read_data)
        if (cmd.op == DISK_READ and output_mode and result.status == STATUS_OK
                and not self.replaying and self.emit is not None):
            self.emit(FrameKind.DISK_READ, epoch, result.data)
        if result.irq:
            self.raise_irq(VEC_DISK)

    def deliver_rx(self, payload: bytes) -> bool:
        ok = self.nic.nic_rx(payload)
        if ok:
            self.raise_irq(self.nic.vector)
        return ok
