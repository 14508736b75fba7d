"""Toy guest machine: ISA, program loader, interpreter, epochs and digests.

The machine has eight 64-bit registers r0..r7, a repeat counter ``cnt``
(addressable as register operand ``cnt``), a flat memory of 65536 64-bit
words and a separate code space indexed by ``ip``.  Words 0..7 of memory form
the interrupt vector table.

Two interpreters share the same semantics:

* :func:`step` executes exactly one instruction and is the reference.
* :func:`execute` is the batch loop used by the record and replay drivers.
  It runs deterministic instructions only and stops in front of RDTSC, IN and
  OUT so the caller can route them through its device bus.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Protocol

MASK64 = (1 << 64) - 1
MEM_WORDS = 65536
NUM_REGS = 8
CNT = 8  # register-operand index of the repeat counter
NUM_VECTORS = 8

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class Op(enum.IntEnum):
    ADD = 0
    SUB = 1
    MOVI = 2
    LOAD = 3
    STORE = 4
    JMP = 5
    JNZ = 6
    REPSTORE = 7
    RDTSC = 8
    IN = 9
    OUT = 10
    WAIT = 11
    IRET = 12
    HALT = 13


# operand kinds per opcode: r = register, i = immediate, a = code address, p = port
_OPERANDS = {
    Op.ADD: "rrr",
    Op.SUB: "rrr",
    Op.MOVI: "ri",
    Op.LOAD: "rr",
    Op.STORE: "rr",
    Op.JMP: "a",
    Op.JNZ: "ra",
    Op.REPSTORE: "rr",
    Op.RDTSC: "r",
    Op.IN: "rp",
    Op.OUT: "pr",
    Op.WAIT: "",
    Op.IRET: "",
    Op.HALT: "",
}

SERVICE_OPS = frozenset((Op.RDTSC, Op.IN, Op.OUT))
BRANCH_OPS = frozenset((Op.JMP, Op.JNZ, Op.IRET))


class Epoch(NamedTuple):
    """Execution position: (branch count, instruction pointer, repeat counter)."""

    nbranches: int
    ip: int
    cnt: int


class Instruction(NamedTuple):
    op: int
    a: int = 0
    b: int = 0
    c: int = 0

    def __str__(self) -> str:
        kinds = _OPERANDS[Op(self.op)]
        parts = []
        for kind, value in zip(kinds, (self.a, self.b, self.c)):
            if kind == "r":
                parts.append("cnt" if value == CNT else f"r{value}")
            else:
                parts.append(str(value))
        return " ".join([Op(self.op).name] + parts)


class ProgramError(ValueError):
    """Raised when program text cannot be assembled."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Program:
    code: tuple
    source: str = ""
    vectors: tuple = ()  # (vector, handler address) preloaded into mem[0..7]

    def __len__(self) -> int:
        return len(self.code)

    @property
    def hash(self) -> int:
        """64-bit FNV-1a over the canonical little-endian instruction encoding."""
        buf = b"".join(
            struct.pack("<BQQQ", ins.op, ins.a & MASK64, ins.b & MASK64, ins.c & MASK64)
            for ins in self.code
        )
        return fnv1a64(buf)

    def text(self) -> str:
        lines = [f".vector {v} {t}" for v, t in self.vectors]
        return "\n".join(lines + [str(ins) for ins in self.code]) + "\n"


_LABEL = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):$")


def _parse_reg(tok: str, line: int) -> int:
    if tok == "cnt":
        return CNT
    if len(tok) == 2 and tok[0] == "r" and tok[1].isdigit() and int(tok[1]) < NUM_REGS:
        return int(tok[1])
    raise ProgramError(line, f"bad register {tok!r}")


def assemble(text: str) -> Program:
    """Assemble program text into a :class:`Program`.

    One instruction per line, ``OPCODE operands`` with decimal operands and
    ``#`` comments.  Blank and comment-only lines are skipped, so the k-th
    instruction line is code address k.  A line ``name:`` labels the next
    instruction; labels may stand in for addresses and MOVI immediates.
    ``.vector N target`` preloads vector-table word N with a handler address.
    """
    rows = []
    labels: dict[str, int] = {}
    directives = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].replace(",", " ").strip()
        if not body:
            continue
        m = _LABEL.match(body)
        if m:
            if m.group(1) in labels:
                raise ProgramError(lineno, f"duplicate label {m.group(1)!r}")
            labels[m.group(1)] = len(rows)
            continue
        if body.startswith(".vector"):
            directives.append((lineno, body.split()[1:]))
            continue
        rows.append((lineno, body.split()))

    vectors = []
    for lineno, args in directives:
        if len(args) != 2 or not args[0].isdigit() or int(args[0]) >= NUM_VECTORS:
            raise ProgramError(lineno, "usage: .vector N target, N < 8")
        target = labels.get(args[1])
        if target is None:
            if not args[1].isdigit():
                raise ProgramError(lineno, f"unknown label {args[1]!r}")
            target = int(args[1])
        vectors.append((int(args[0]), target))

    code = []
    for lineno, toks in rows:
        try:
            op = Op[toks[0].upper()]
        except KeyError:
            raise ProgramError(lineno, f"unknown opcode {toks[0]!r}") from None
        kinds = _OPERANDS[op]
        args = toks[1:]
        if len(args) != len(kinds):
            raise ProgramError(lineno, f"{op.name} takes {len(kinds)} operands, got {len(args)}")
        vals = []
        for kind, tok in zip(kinds, args):
            if kind == "r":
                vals.append(_parse_reg(tok, lineno))
            elif tok in labels and kind in "ia":
                vals.append(labels[tok])
            else:
                try:
                    v = int(tok, 10)
                except ValueError:
                    raise ProgramError(lineno, f"bad operand {tok!r}") from None
                if v < 0:
                    v &= MASK64
                if kind == "p" and v > 255:
                    raise ProgramError(lineno, f"port out of range: {v}")
                vals.append(v & MASK64)
        code.append(Instruction(int(op), *vals))
    return Program(tuple(code), text, tuple(vectors))


def load_program(path) -> Program:
    with open(path, encoding="utf-8") as fh:
        return assemble(fh.read())


@dataclass
class GuestState:
    program: Program
    regs: list = field(default_factory=lambda: [0] * NUM_REGS)
    ip: int = 0
    cnt: int = 0
    nbranches: int = 0
    mem: list = field(default_factory=lambda: [0] * MEM_WORDS)
    isave: int = 0
    intr_enabled: bool = True
    halted: bool = False
    waiting: bool = False
    fault: Optional[str] = None

    def copy(self) -> "GuestState":
        return GuestState(
            self.program, list(self.regs), self.ip, self.cnt, self.nbranches,
            list(self.mem), self.isave, self.intr_enabled, self.halted,
            self.waiting, self.fault,
        )

    def same_as(self, other: "GuestState") -> bool:
        """Full bit-compare of architectural state (program identity excluded)."""
        return (
            self.regs == other.regs and self.ip == other.ip and self.cnt == other.cnt
            and self.nbranches == other.nbranches and self.isave == other.isave
            and self.intr_enabled == other.intr_enabled and self.halted == other.halted
            and self.waiting == other.waiting and self.fault == other.fault
            and self.mem == other.mem
        )


def new_state(program: Program, memory_image: Optional[bytes] = None) -> GuestState:
    state = GuestState(program)
    for vector, target in program.vectors:
        state.mem[vector] = target
    if memory_image:
        words = load_memory_image(memory_image)
        state.mem[: len(words)] = words
    return state


def load_memory_image(data: bytes) -> list:
    """Raw little-endian 64-bit words; a trailing partial word is zero-padded."""
    if len(data) % 8:
        data = data + b"\0" * (8 - len(data) % 8)
    n = len(data) // 8
    if n > MEM_WORDS:
        raise ValueError(f"memory image too large: {n} words")
    return list(struct.unpack(f"<{n}Q", data))


def epoch_of(state: GuestState) -> Epoch:
    return Epoch(state.nbranches, state.ip, state.cnt)


# -- digests -----------------------------------------------------------------

def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def _fnv_words(words, h: int) -> int:
    # Zero words only multiply by the prime, so runs of them collapse to one pow().
    zeros = 0
    for w in words:
        if not w:
            zeros += 1
            continue
        if zeros:
            h = (h * pow(FNV_PRIME, 8 * zeros, 1 << 64)) & MASK64
            zeros = 0
        for _ in range(8):
            h = ((h ^ (w & 0xFF)) * FNV_PRIME) & MASK64
            w >>= 8
    if zeros:
        h = (h * pow(FNV_PRIME, 8 * zeros, 1 << 64)) & MASK64
    return h


def state_digest(state: GuestState) -> int:
    """64-bit FNV-1a over registers, control state and memory (LE bytes)."""
    flags = int(state.intr_enabled) | int(state.halted) << 1 | int(state.waiting) << 2
    head = list(state.regs) + [state.ip, state.cnt, state.nbranches, state.isave, flags]
    return _fnv_words(state.mem, _fnv_words(head, FNV_OFFSET))


# -- step events and I/O -----------------------------------------------------

class EventKind(enum.Enum):
    NONE = "none"
    ND_READ = "nd_read"
    DEVICE_IN = "device_in"
    DEVICE_OUT = "device_out"
    HALTED = "halted"
    ENTERED_WAIT = "entered_wait"
    FAULT = "fault"


TSC_PORT = -1  # ND_READ port reported for RDTSC


@dataclass(frozen=True)
class StepEvent:
    kind: EventKind
    port: int = 0
    value: int = 0
    reason: str = ""


NO_EVENT = StepEvent(EventKind.NONE)


class PortIO(Protocol):
    """What the interpreter needs from the outside world."""

    def rdtsc(self, epoch: Epoch) -> int: ...

    def port_in(self, port: int, epoch: Epoch) -> tuple[int, bool]:
        """Return ``(value, nondeterministic)`` for an IN."""
        ...

    def port_out(self, port: int, value: int, epoch: Epoch) -> None: ...


class NullIO:
    """No devices: RDTSC and IN read zero, OUT is dropped."""

    def rdtsc(self, epoch):
        return 0

    def port_in(self, port, epoch):
        return 0, False

    def port_out(self, port, value, epoch):
        pass


def _reg(state: GuestState, i: int) -> int:
    return state.cnt if i == CNT else state.regs[i]


def _set_reg(state: GuestState, i: int, v: int) -> None:
    if i == CNT:
        state.cnt = v & MASK64
    else:
        state.regs[i] = v & MASK64


def _fault(state: GuestState, reason: str) -> StepEvent:
    state.halted = True
    state.fault = reason
    return StepEvent(EventKind.FAULT, reason=reason)


def step(state: GuestState, io: PortIO) -> tuple[GuestState, StepEvent]:
    """Execute one instruction (or one REPSTORE iteration) in place."""
    if state.halted or state.waiting:
        return state, NO_EVENT
    code = state.program.code
    if state.ip >= len(code):
        return state, _fault(state, f"ip {state.ip} outside program")
    ins = code[state.ip]
    op, a, b, c = ins
    epoch = Epoch(state.nbranches, state.ip, state.cnt)
    event = NO_EVENT

    if op == Op.ADD:
        _set_reg(state, a, _reg(state, b) + _reg(state, c))
        state.ip += 1
    elif op == Op.SUB:
        _set_reg(state, a, _reg(state, b) - _reg(state, c))
        state.ip += 1
    elif op == Op.MOVI:
        _set_reg(state, a, b)
        state.ip += 1
    elif op == Op.LOAD:
        addr = _reg(state, b)
        if addr >= MEM_WORDS:
            return state, _fault(state, f"load from {addr}")
        _set_reg(state, a, state.mem[addr])
        state.ip += 1
    elif op == Op.STORE:
        addr = _reg(state, a)
        if addr >= MEM_WORDS:
            return state, _fault(state, f"store to {addr}")
        state.mem[addr] = _reg(state, b)
        state.ip += 1
    elif op == Op.JMP:
        state.nbranches += 1
        state.ip = a
    elif op == Op.JNZ:
        state.nbranches += 1
        state.ip = b if _reg(state, a) else state.ip + 1
    elif op == Op.REPSTORE:
        if state.cnt == 0:
            state.ip += 1
        else:
            addr = _reg(state, a)
            if addr >= MEM_WORDS:
                return state, _fault(state, f"repstore to {addr}")
            state.mem[addr] = _reg(state, b)
            _set_reg(state, a, addr + 1)
            state.cnt -= 1
            if state.cnt == 0:
                state.ip += 1
    elif op == Op.RDTSC:
        value = io.rdtsc(epoch) & MASK64
        _set_reg(state, a, value)
        state.ip += 1
        event = StepEvent(EventKind.ND_READ, TSC_PORT, value)
    elif op == Op.IN:
        value, nd = io.port_in(b, epoch)
        value &= MASK64
        _set_reg(state, a, value)
        state.ip += 1
        event = StepEvent(EventKind.ND_READ if nd else EventKind.DEVICE_IN, b, value)
    elif op == Op.OUT:
        value = _reg(state, b)
        io.port_out(a, value, epoch)
        state.ip += 1
        event = StepEvent(EventKind.DEVICE_OUT, a, value)
    elif op == Op.WAIT:
        state.waiting = True
        state.ip += 1
        event = StepEvent(EventKind.ENTERED_WAIT)
    elif op == Op.IRET:
        state.nbranches += 1
        state.ip = state.isave
        state.intr_enabled = True
    elif op == Op.HALT:
        state.halted = True
        event = StepEvent(EventKind.HALTED)
    else:
        return state, _fault(state, f"invalid opcode {op}")
    return state, event


def deliver_interrupt(state: GuestState, vector: int) -> GuestState:
    """Vector the guest through the table at memory words 0..7.

    Raises ValueError (state unchanged) for a bad vector or when interrupts
    are disabled; callers queue the request in the latter case.
    """
    if not 0 <= vector < NUM_VECTORS:
        raise ValueError(f"bad interrupt vector {vector}")
    if not state.intr_enabled:
        raise ValueError("interrupts disabled")
    state.isave = state.ip
    state.ip = state.mem[vector]
    state.intr_enabled = False
    state.waiting = False
    return state


# -- batch interpreter -------------------------------------------------------

class Stop(enum.Enum):
    BUDGET = "budget"
    BRANCH_LIMIT = "branch_limit"
    SERVICE = "service"
    WAITING = "waiting"
    HALTED = "halted"


def execute(state: GuestState, max_steps: int, branch_limit: int = MASK64,
            port_read: Optional[Callable[[int], Optional[int]]] = None) -> tuple[int, Stop]:
    """Run deterministic instructions in place; returns ``(steps, why)``.

    Stops in front of RDTSC/IN/OUT (``SERVICE``), after a WAIT or HALT, after
    a fault (reported as ``HALTED``), when ``max_steps`` is used up, or right
    after a branch brings ``nbranches`` to ``branch_limit``.  ``port_read``
    lets device reads that need no log frame run inline: it returns the
    value, or None when the read must take the full service path.
    """
    if state.halted:
        return 0, Stop.HALTED
    if state.waiting:
        return 0, Stop.WAITING
    if state.nbranches >= branch_limit:
        return 0, Stop.BRANCH_LIMIT
    code = state.program.code
    ncode = len(code)
    r = state.regs + [state.cnt]
    mem = state.mem
    ip = state.ip
    nb = state.nbranches
    steps = 0
    why = Stop.BUDGET
    fault = None
    M = MASK64
    while steps < max_steps:
        if ip >= ncode:
            fault = f"ip {ip} outside program"
            break
        op, a, b, c = code[ip]
        if op == 6:  # JNZ
            nb += 1
            steps += 1
            ip = b if r[a] else ip + 1
            if nb >= branch_limit:
                why = Stop.BRANCH_LIMIT
                break
        elif op == 0:  # ADD
            r[a] = (r[b] + r[c]) & M
            ip += 1
            steps += 1
        elif op == 1:  # SUB
            r[a] = (r[b] - r[c]) & M
            ip += 1
            steps += 1
        elif op == 5:  # JMP
            nb += 1
            steps += 1
            ip = a
            if nb >= branch_limit:
                why = Stop.BRANCH_LIMIT
                break
        elif op == 2:  # MOVI
            r[a] = b
            ip += 1
            steps += 1
        elif op == 3:  # LOAD
            addr = r[b]
            if addr >= 65536:
                fault = f"load from {addr}"
                break
            r[a] = mem[addr]
            ip += 1
            steps += 1
        elif op == 4:  # STORE
            addr = r[a]
            if addr >= 65536:
                fault = f"store to {addr}"
                break
            mem[addr] = r[b]
            ip += 1
            steps += 1
        elif op == 7:  # REPSTORE
            if r[8] == 0:
                ip += 1
            else:
                addr = r[a]
                if addr >= 65536:
                    fault = f"repstore to {addr}"
                    break
                mem[addr] = r[b]
                r[a] = (addr + 1) & M
                r[8] -= 1
                if r[8] == 0:
                    ip += 1
            steps += 1
        elif op == 12:  # IRET
            nb += 1
            steps += 1
            ip = state.isave
            state.intr_enabled = True
            if nb >= branch_limit:
                why = Stop.BRANCH_LIMIT
                break
        elif op == 11:  # WAIT
            state.waiting = True
            ip += 1
            steps += 1
            why = Stop.WAITING
            break
        elif op == 13:  # HALT
            state.halted = True
            steps += 1
            why = Stop.HALTED
            break
        elif op == 9 and port_read is not None and (v := port_read(b)) is not None:  # IN
            r[a] = v & M
            ip += 1
            steps += 1
        elif 8 <= op <= 10:
            why = Stop.SERVICE
            break
        else:
            fault = f"invalid opcode {op}"
            break
    if fault is not None:
        steps += 1
        state.halted = True
        state.fault = fault
        why = Stop.HALTED
    state.regs[:] = r[:8]
    state.cnt = r[8]
    state.ip = ip
    state.nbranches = nb
    return steps, why


def execute_stepwise(state: GuestState, max_steps: int, branch_limit: int = MASK64,
                     trace: Optional[list] = None) -> tuple[int, Stop]:
    """Same contract as :func:`execute`, built on :func:`step`.

    Appends the pre-step epoch of every executed step to ``trace``.
    """
    if state.halted:
        return 0, Stop.HALTED
    if state.waiting:
        return 0, Stop.WAITING
    if state.nbranches >= branch_limit:
        return 0, Stop.BRANCH_LIMIT
    io = NullIO()
    code = state.program.code
    steps = 0
    while steps < max_steps:
        if state.ip < len(code) and code[state.ip].op in SERVICE_OPS:
            return steps, Stop.SERVICE
        if trace is not None:
            trace.append(epoch_of(state))
        nb = state.nbranches
        _, ev = step(state, io)
        steps += 1
        if ev.kind in (EventKind.HALTED, EventKind.FAULT):
            return steps, Stop.HALTED
        if ev.kind is EventKind.ENTERED_WAIT:
            return steps, Stop.WAITING
        if state.nbranches != nb and state.nbranches >= branch_limit:
            return steps, Stop.BRANCH_LIMIT
    return steps, Stop.BUDGET


# -- run_until ----------------------------------------------------------------

class EpochInPast(ValueError):
    pass


@dataclass(frozen=True)
class StopCondition:
    """Exactly one of ``epoch``, ``steps`` or ``halted`` should be set."""

    epoch: Optional[Epoch] = None
    steps: Optional[int] = None
    halted: bool = False


def run_until(state: GuestState, io: PortIO, stop: StopCondition,
              max_steps: int = 10_000_000) -> tuple[GuestState, list]:
    """Apply :func:`step` until ``stop``; returns the state and the
    ``(epoch, event)`` trace of executed steps.

    A waiting guest has nothing to execute, so the run ends there too.
    """
    if stop.epoch is not None and state.nbranches > stop.epoch.nbranches:
        raise EpochInPast(f"epoch in the past: at {epoch_of(state)}, asked for {stop.epoch}")
    trace = []
    limit = stop.steps if stop.steps is not None else max_steps
    while len(trace) < limit:
        if state.halted or state.waiting:
            break
        if stop.epoch is not None:
            if epoch_of(state) == stop.epoch:
                break
            if state.nbranches > stop.epoch.nbranches:
                raise EpochInPast(f"passed {stop.epoch} without reaching it")
        before = epoch_of(state)
        _, ev = step(state, io)
        trace.append((before, ev))
    return state, trace
