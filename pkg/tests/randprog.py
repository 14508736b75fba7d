"""Random well-formed guest programs for property and acceptance tests.

Layout: vector-table entries for handlers 0..2, a random body that
loops back to its start, then one handler per vector.  Handlers hold no
branches except the closing IRET, so interrupted code is never re-entered
without a branch in between.
"""

import random

from replicavm.guest import assemble

REGS = ["r0", "r1", "r2", "r3", "r4", "r5"]


def _handler(rng, v):
    lines = [f"h{v}:"]
    for _ in range(rng.randint(0, 3)):
        lines.append(f"ADD r5 r5 {rng.choice(REGS)}")
    lines.append("IRET")
    return lines


def random_program_text(rng: random.Random, max_len: int = 200, devices: bool = True,
                        waits: bool = True) -> str:
    prologue = [f".vector {v} h{v}" for v in range(3)]
    handlers = []
    for v in range(3):
        handlers += _handler(rng, v)
    n_handler = sum(1 for h in handlers if not h.endswith(":"))
    budget = max(8, max_len - n_handler - 1)
    body = []
    while len(body) < budget - 3:
        kind = rng.random()
        r = rng.choice
        if kind < 0.22:
            body.append(f"{r(['ADD', 'SUB'])} {r(REGS)} {r(REGS + ['cnt'])} {r(REGS)}")
        elif kind < 0.32:
            imm = rng.choice([0, 1, 2, 3, rng.getrandbits(8), rng.getrandbits(64)])
            body.append(f"MOVI {r(REGS)} {imm}")
        elif kind < 0.42:
            body += [f"MOVI r6 {rng.randint(8, 65535)}", f"STORE r6 {r(REGS)}"]
        elif kind < 0.50:
            body += [f"MOVI r6 {rng.randint(8, 65535)}", f"LOAD {r(REGS)} r6"]
        elif kind < 0.60:
            target = rng.randint(0, max(0, budget - 1))
            body.append(f"JNZ {r(REGS)} b{target}")
        elif kind < 0.63:
            target = rng.randint(0, max(0, budget - 1))
            body.append(f"JMP b{target}")
        elif kind < 0.72:
            body += [f"MOVI r6 {rng.randint(8, 60000)}", f"MOVI cnt {rng.randint(0, 50)}",
                     f"REPSTORE r6 {r(REGS)}"]
        elif kind < 0.78:
            body.append(f"RDTSC {r(REGS)}")
        elif devices and kind < 0.84:
            body.append(f"IN {r(REGS)} {r([4, 5, 7, 7])}")
        elif devices and kind < 0.88:
            body.append(f"OUT {r([4, 4, 5])} {r(REGS)}")
        elif waits and kind < 0.91:
            body.append("WAIT")
        elif kind < 0.915:
            body.append("HALT")
        else:
            body.append(f"ADD r5 r5 {r(REGS)}")
    out = list(prologue)
    for i, line in enumerate(body):
        out.append(f"b{i}:")
        out.append(line)
    # JNZ/JMP targets past the body end land on the loop-back jump
    for i in range(len(body), budget):
        out.append(f"b{i}:")
    out.append("JMP b0")
    out += handlers
    return "\n".join(out) + "\n"


def random_program(rng: random.Random, **kw):
    return assemble(random_program_text(rng, **kw))
