"""Named benchmark workloads: a fixture program plus its device setup."""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .devices import (
    BLOCK_SIZE, BlockImage, DeviceBus, DiskDevice, DiskMode, NicDevice, TimerDevice,
)
from .guest import GuestState, Program, assemble, new_state

PARAM_WORD = 8  # fixtures read their size parameter from mem[8]


@dataclass(frozen=True)
class Workload:
    name: str
    timer_ms: Optional[float] = None
    disk_blocks: int = 0
    filled_blocks: int = 0
    param: Optional[int] = None
    steps: Optional[int] = None
    duration_ms: Optional[float] = None
    description: str = ""

    @property
    def program(self) -> Program:
        return load_fixture(self.name)

    def disk_image(self, seed: int = 0) -> BlockImage:
        img = BlockImage(self.disk_blocks)
        rng = random.Random(seed)
        for b in range(self.filled_blocks):
            img.write_block(b, rng.randbytes(BLOCK_SIZE))
        return img

    def initial_state(self) -> GuestState:
        st = new_state(self.program)
        if self.param is not None:
            st.mem[PARAM_WORD] = self.param
        return st

    def build(self, mode: DiskMode = DiskMode.FULL_REPLAY, clock=None, seed: int = 0,
              timer_ms: Optional[float] = None, param: Optional[int] = None):
        """Fresh (state, bus) for one run."""
        wl = self if param is None else _with_param(self, param)
        st = wl.initial_state()
        period = timer_ms if timer_ms is not None else wl.timer_ms
        timer = TimerDevice(period) if period else None
        bus = DeviceBus(disk=DiskDevice(wl.disk_image(seed), mode), nic=NicDevice(),
                        timer=timer, clock=clock, seed=seed)
        return st, bus


def _with_param(wl: Workload, param: int) -> Workload:
    blocks = wl.disk_blocks
    filled = wl.filled_blocks
    if wl.name == "diskcopy":
        blocks, filled = 2 * param, param
    elif wl.name == "streamcopy":
        blocks = filled = param
    return Workload(wl.name, wl.timer_ms, blocks, filled, param, wl.steps, wl.duration_ms,
                    wl.description)


def load_fixture(name: str) -> Program:
    text = resources.files("replicavm").joinpath("fixtures").joinpath(f"{name}.rr").read_text()
    return assemble(text)


WORKLOADS = {
    w.name: w for w in (
        Workload("emptyloop", timer_ms=10.0, steps=1_000_000,
                 description="compute-bound counter loop"),
        Workload("sleeploop", timer_ms=10.0, duration_ms=1000.0,
                 description="idle WAIT loop woken by the timer"),
        Workload("diskcopy", disk_blocks=512, filled_blocks=256, param=256,
                 description="1 MiB block copy by polling"),
        Workload("netrx", timer_ms=10.0, duration_ms=1000.0,
                 description="sums inbound frames"),
        Workload("nettx", timer_ms=10.0, duration_ms=1000.0,
                 description="one outbound frame per timer tick"),
        Workload("streamcopy", disk_blocks=64, filled_blocks=64, param=64,
                 description="sequenced stream of disk blocks"),
        Workload("pingserver", duration_ms=1000.0,
                 description="busy-polling echo responder"),
    )
}


def get(name: str) -> Workload:
    try:
        return WORKLOADS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}; known: {', '.join(WORKLOADS)}") from None
