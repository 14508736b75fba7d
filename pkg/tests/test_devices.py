import pytest

from replicavm import workloads
from replicavm.devices import (
    BLOCK_SIZE, BLOCK_WORDS, STATUS_BAD_BLOCK, STATUS_BAD_CMD, BlockImage, CowImage,
    DeviceBus, DiskCommand, DiskDevice, DiskMode, NicDevice, Snapshot, TimerDevice, VirtualClock,
)
from replicavm.guest import Epoch, assemble, new_state, step
from replicavm.log import FrameKind
from replicavm.recorder import record_run
from replicavm.replayer import replay_bus, replay_run


def test_write_then_read_block():
    disk = DiskDevice(BlockImage(8))
    mem = [0] * 65536
    mem[1000:1000 + BLOCK_WORDS] = [9] * BLOCK_WORDS
    disk.disk_io(DiskCommand(5, 1000, 1), mem)
    assert mem[1000] == 0
    mem[2000:2000 + BLOCK_WORDS] = [0] * BLOCK_WORDS
    disk.disk_io(DiskCommand(5, 2000, 2), mem)
    mem[3000:3000 + BLOCK_WORDS] = [7] * BLOCK_WORDS
    res = disk.disk_io(DiskCommand(5, 3000, 1), mem)
    assert res.status == 0
    assert mem[3000:3000 + BLOCK_WORDS] == [0] * BLOCK_WORDS


def test_disk_errors_leave_memory_alone():
    disk = DiskDevice(BlockImage(2))
    mem = [3] * 65536
    assert disk.disk_io(DiskCommand(2, 0, 1), mem).status == STATUS_BAD_BLOCK
    assert disk.disk_io(DiskCommand(0, 0, 3), mem).status == STATUS_BAD_CMD
    assert disk.disk_io(DiskCommand(0, 65536 - 10, 1), mem).status != 0
    assert set(mem) == {3}


def test_block_image_limits(tmp_path):
    with pytest.raises(ValueError):
        BlockImage(4097)
    img = BlockImage(3)
    img.write_block(1, b"\x01" * BLOCK_SIZE)
    img.save(tmp_path / "d.img")
    assert BlockImage.from_file(tmp_path / "d.img").to_bytes() == img.to_bytes()


def test_cow_overlay_round_trip(tmp_path):
    base = BlockImage(4)
    cow = CowImage(base)
    cow.write_block(2, b"\x05" * BLOCK_SIZE)
    assert base.read_block(2) == bytes(BLOCK_SIZE)
    cow.save_overlay(tmp_path / "o.bin")
    again = CowImage(base, CowImage.load_overlay(tmp_path / "o.bin"))
    assert again.to_bytes() == cow.to_bytes()


def test_snapshot_is_frozen():
    disk = DiskDevice(BlockImage(2))
    snap = disk.take_snapshot()
    mem = [1] * 65536
    disk.disk_io(DiskCommand(0, 0, 2), mem)
    assert snap.base.read_block(0) == bytes(BLOCK_SIZE)
    assert snap.digest == Snapshot(BlockImage(2)).digest
    assert snap.fork().read_block(0) == bytes(BLOCK_SIZE)


def test_timer_two_requests_after_25ms():
    t = TimerDevice(10.0)
    t.start(0.0)
    got = [t.timer_poll(25.0) for _ in range(4)]
    assert got.count(0) == 2


def test_timer_period_must_be_positive():
    with pytest.raises(ValueError):
        TimerDevice(0)


def test_replay_bus_ignores_interrupt_requests():
    bus = DeviceBus(timer=TimerDevice(1.0))
    bus.replaying = True
    bus.raise_irq(0)
    bus.deliver_rx(b"x")
    assert not bus.pending


def test_idle_record_with_10ms_timer_has_about_100_interrupts():
    st, bus = workloads.get("sleeploop").build(clock=VirtualClock(500.0), timer_ms=10.0)
    r = record_run(st, bus, duration_ms=1000.0)
    n = r.log.count(FrameKind.INTERRUPT)
    assert 95 <= n <= 101
    assert r.log.payload_bytes(FrameKind.INTERRUPT) == n


def test_rx_abcd_read_by_guest():
    prog = assemble("IN r0 5\nIN r1 4\nIN r2 5\nHALT\n")
    st = new_state(prog)
    bus = DeviceBus()
    bus.attach(st)
    assert bus.nic.nic_rx(b"abcd")
    for _ in range(3):
        step(st, bus)
    assert st.regs[0] == 4
    assert st.regs[1] == int.from_bytes(b"abcd", "little")
    assert st.regs[2] == 0


def test_oversize_frames_dropped_and_counted():
    nic = NicDevice()
    assert not nic.nic_rx(bytes(1501))
    assert nic.nic_rx(bytes(1500))
    assert nic.dropped == 1
    nic.tx_buf += bytes(1504)
    assert nic.nic_tx(Epoch(0, 0, 0)) is None and nic.dropped == 2


def test_tx_during_replay_is_marked():
    prog = assemble("OUT 4 r0\nOUT 5 r0\nHALT\n")
    st = new_state(prog)
    bus = DeviceBus()
    bus.replaying = True
    bus.attach(st)
    for _ in range(2):
        step(st, bus)
    (frame,) = bus.nic.sent
    assert frame.replay_origin and frame.payload == bytes(8) and frame.epoch == (0, 1, 0)


def test_ten_rx_frames_logged_bit_identical():
    payloads = [bytes([i]) * (i + 3) for i in range(10)]
    st, bus = workloads.get("netrx").build(clock=VirtualClock(500.0))
    r = record_run(st, bus, duration_ms=200.0, rx=[(5.0 + 13 * i, p) for i, p in enumerate(payloads)])
    logged = [f.payload for f in r.log.frames if f.kind == FrameKind.NET_RX]
    assert logged == payloads
    assert st.regs[0] == sum(int.from_bytes(p[k:k + 8], "little")
                             for p in payloads for k in range(0, len(p), 8)) % (1 << 64)


DISK_RW = """
MOVI r1 1
MOVI r5 4096
OUT 1 r5
MOVI r3 9
OUT 0 r3
OUT 2 r1
MOVI r0 555
MOVI cnt 20
REPSTORE r5 r0
MOVI r3 1
OUT 0 r3
MOVI r6 2
OUT 2 r6
HALT
"""


def _disk_round_trip(mode):
    image = BlockImage(10)
    image.write_block(9, bytes(range(256)) * 16)
    pristine = image.to_bytes()
    st = new_state(assemble(DISK_RW))
    init = st.copy()
    bus = DeviceBus(disk=DiskDevice(image, mode), clock=VirtualClock(500.0))
    r = record_run(st, bus)
    rbus = replay_bus(r.log.header, disk_image=BlockImage(data=pristine),
                      snapshot=bus.disk.snapshot)
    before = rbus.disk.image.to_bytes()
    res = replay_run(r.log, init, snapshot=bus.disk.snapshot, bus=rbus)
    return r, res, st, bus, rbus, before


def test_full_replay_disk_read_needs_no_log():
    r, res, st, bus, rbus, _ = _disk_round_trip(DiskMode.FULL_REPLAY)
    assert r.log.count(FrameKind.DISK_READ) == 0
    assert res.verified and res.state.same_as(st)
    assert rbus.disk.image.to_bytes() == bus.disk.image.to_bytes()
    assert rbus.disk.image.read_block(1)[:8] == (555).to_bytes(8, "little")


def test_output_replay_logs_reads_and_leaves_image_untouched():
    r, res, st, bus, rbus, before = _disk_round_trip(DiskMode.OUTPUT_REPLAY)
    assert r.log.payload_bytes(FrameKind.DISK_READ) == BLOCK_SIZE
    assert res.verified and res.state.same_as(st)
    assert rbus.disk.image.to_bytes() == before
    assert rbus.disk.image.to_bytes() != bus.disk.image.to_bytes()


def test_full_replay_needs_snapshot():
    r, *_ = _disk_round_trip(DiskMode.FULL_REPLAY)
    with pytest.raises(Exception, match="snapshot"):
        replay_bus(r.log.header)


@pytest.mark.parametrize("steps", [50, 500, 1500, 2600])
def test_full_replay_matches_at_intermediate_points(steps):
    wl = workloads.get("diskcopy")
    st, bus = wl.build(DiskMode.FULL_REPLAY, clock=VirtualClock(500.0), param=8)
    init = st.copy()
    r = record_run(st, bus, steps=steps)
    res = replay_run(r.log, init, snapshot=bus.disk.snapshot)
    assert res.verified and res.state.same_as(st)
    assert res.bus.disk.image.to_bytes() == bus.disk.image.to_bytes()


def test_diskcopy_mode_ratio():
    sizes = {}
    for mode in DiskMode:
        st, bus = workloads.get("diskcopy").build(mode, clock=VirtualClock(500.0))
        r = record_run(st, bus)
        sizes[mode] = r.log
    assert sizes[DiskMode.OUTPUT_REPLAY].payload_bytes(FrameKind.DISK_READ) >= 1 << 20
    assert sizes[DiskMode.FULL_REPLAY].payload_bytes(FrameKind.DISK_READ) == 0
    assert sizes[DiskMode.OUTPUT_REPLAY].nbytes >= 100 * sizes[DiskMode.FULL_REPLAY].nbytes


def test_disk_mode_parse():
    assert DiskMode.parse("full") is DiskMode.FULL_REPLAY
    assert DiskMode.parse("output") is DiskMode.OUTPUT_REPLAY
    with pytest.raises(ValueError):
        DiskMode.parse("both")
