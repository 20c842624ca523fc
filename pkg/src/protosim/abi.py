"""Actions a task generator may yield to the kernel trampoline, and the
guest-side view of task memory.

Guest programs are host generators, but all of their *data* lives in
simulated memory reached through translate(); a faulting access invokes
the kernel's fault handler and either retries or unwinds the task.

fork()/clone() take an explicit child continuation: generator state is
host-level code, so the child's user-side resume point is named as a
function instead of being cloned. Kernel-side semantics (eager address
space copy, fd-table duplication, tid rules) are unchanged.
"""

import struct
from dataclasses import dataclass

from .mem import PERM_W, translate
from .sched import TaskKilled


@dataclass(frozen=True)
class Cpu:
    """Consume simulated CPU time (guest compute cost model)."""

    ticks: int


@dataclass(frozen=True)
class Sys:
    """Invoke a syscall by name; resumes with its return value."""

    name: str
    args: tuple = ()


def sc(name, *args):
    return Sys(name, args)


@dataclass(frozen=True)
class Fork:
    """sys_fork with the child's user-side continuation."""

    child: object  # callable(ctx) -> generator


@dataclass(frozen=True)
class Clone:
    """sys_clone(CLONE_VM) with the thread body and its stack pointer."""

    thread: object
    stack_top: int
    flags: int = 1   # CLONE_VM


@dataclass(frozen=True)
class KWait:
    """Kernel threads only: park on a channel with a wake deadline."""

    channel: object
    deadline: int


CLONE_VM = 1


SHARED_ACCESS_COST = 3  # coherency fee per access to thread-shared memory


class GuestMemory:
    """Translated load/store access to a task's address space."""

    def __init__(self, kernel, task):
        self.kernel = kernel
        self.task = task

    def _coherency_fee(self):
        # shared mappings on a multicore boot pay for coherency traffic
        aspace = self.task.aspace
        if (aspace is not None and aspace.share_count > 1
                and self.kernel.profile.ncores > 1):
            self.task.charge(SHARED_ACCESS_COST)

    def _resolve(self, va, access):
        while True:
            pa = translate(self.task.aspace, va, access)
            if not hasattr(pa, "va"):
                return pa
            self.kernel.trace_fault(self.task, va)
            outcome = self.kernel.mem.handle_fault(self.task, va)
            if outcome == self.kernel.mem.KILLED:
                raise TaskKilled(self.task.kill_code)

    def read(self, va, n):
        self._coherency_fee()
        out = bytearray()
        while n > 0:
            pa = self._resolve(va, access=1)
            chunk = min(n, 4096 - (va & 4095))
            out += self.kernel.mem.phys_read(pa, chunk)
            va += chunk
            n -= chunk
        return bytes(out)

    def write(self, va, data):
        self._coherency_fee()
        i = 0
        while i < len(data):
            pa = self._resolve(va + i, access=PERM_W)
            chunk = min(len(data) - i, 4096 - ((va + i) & 4095))
            self.kernel.mem.phys_write(pa, data[i : i + chunk])
            i += chunk

    def r32(self, va):
        return struct.unpack("<I", self.read(va, 4))[0]

    def w32(self, va, value):
        self.write(va, struct.pack("<I", value & 0xFFFFFFFF))

    def r64(self, va):
        return struct.unpack("<Q", self.read(va, 8))[0]

    def w64(self, va, value):
        self.write(va, struct.pack("<Q", value & (2**64 - 1)))


class GuestContext:
    """What a guest behavior gets: its memory view and startup argv."""

    def __init__(self, kernel, task):
        self.kernel = kernel
        self.task = task
        self.mem = GuestMemory(kernel, task)

    @property
    def tid(self):
        return self.task.tid

    def argv(self):
        """Parse argv back out of the stack the loader wrote."""
        sp = self.task.argv_sp
        if sp is None:
            return list(self.task.argv)
        argc = self.mem.r64(sp)
        out = []
        for i in range(argc):
            ptr = self.mem.r64(sp + 8 * (1 + i))
            raw = bytearray()
            while True:
                b = self.mem.read(ptr + len(raw), 1)
                if b == b"\0" or len(raw) > 4096:
                    break
                raw += b
            out.append(raw.decode("utf-8", "replace"))
        return out
