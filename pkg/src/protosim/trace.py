"""ftrace-style event ring shared by all cores, plus the panic-button dump.

emit() is constant work and never blocks, so it is safe from any kernel
path including interrupt-masked regions. The panic path is FIQ-sourced:
it works even when every core has interrupts masked or the kernel is
wedged on a simulated deadlock.
"""

from dataclasses import dataclass
from enum import IntEnum

TRACE_CAPACITY = 65536
PANIC_TAIL = 32  # trace records included in a panic dump


class TraceKind(IntEnum):
    SCHED_SWITCH = 0
    SYSCALL_ENTER = 1
    SYSCALL_EXIT = 2
    IRQ = 3
    FAULT = 4
    WM_COMPOSITE = 5
    USER_MARK = 6


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    core: int
    kind: TraceKind
    a: int = 0
    b: int = 0

    def render(self):
        return f"{self.tick} {self.core} {self.kind.name} {self.a} {self.b}"


class TraceRing:
    """Fixed-capacity ring; oldest records are overwritten first."""

    def __init__(self, capacity=TRACE_CAPACITY):
        self.capacity = capacity
        self._buf = [None] * capacity
        self._write = 0
        self.wrapped = False
        self.total = 0

    def emit(self, tick, core, kind, a=0, b=0):
        self._buf[self._write] = TraceEvent(tick, core, kind, a & (2**64 - 1), b & (2**64 - 1))
        self._write = (self._write + 1) % self.capacity
        if self._write == 0 and self.total + 1 >= self.capacity:
            self.wrapped = True
        self.total += 1

    def dump(self, n):
        """Newest n records, oldest-first. Read-only and idempotent."""
        if n <= 0:
            return []
        have = min(self.total, self.capacity)
        n = min(n, have)
        out = []
        start = (self._write - n) % self.capacity
        for i in range(n):
            out.append(self._buf[(start + i) % self.capacity])
        return out

    def dump_text(self, n):
        return "\n".join(ev.render() for ev in self.dump(n))


def panic_dump_text(kernel, handler_core):
    """Per-core state plus the newest trace records, for the panic button."""
    lines = [f"PANIC handled by core {handler_core} at tick {kernel.hw.clock.now} (FIQ)"]
    for core in kernel.sched.cores:
        task = kernel.sched.tasks.get(core.current) if core.current else None
        if task is None:
            lines.append(f"core {core.id}: idle irq_depth={core.irq_depth}")
        else:
            chan = f" channel={task.wait_channel.key}" if task.wait_channel else ""
            lines.append(
                f"core {core.id}: tid={task.tid} name={task.name} "
                f"state={task.state.name}{chan} irq_depth={core.irq_depth}"
            )
    for task in kernel.sched.tasks.values():
        if task.state.name in ("SLEEPING", "BLOCKED"):
            chan = task.wait_channel.key if task.wait_channel else "?"
            lines.append(
                f"task tid={task.tid} name={task.name} state={task.state.name} "
                f"channel={chan}"
            )
    lines.append(f"trace tail ({PANIC_TAIL}):")
    tail = kernel.trace.dump_text(PANIC_TAIL)
    if tail:
        lines.append(tail)
    return "\n".join(lines)
