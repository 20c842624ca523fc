"""Tasks, per-core round-robin scheduling, sleep/wakeup channels,
reference-counted interrupt masking, and simulated spinlocks.

Cores are interleaved by the single-threaded kernel loop in ascending id
order; a "context switch" is the loop moving to a different task's
generator. Priority is a quanta weight: a task dispatched with priority p
keeps the core for p consecutive timer quanta.
"""

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import SimError, Err, UnderflowPanic
from .trace import TraceKind

MAX_TASKS = 256
QUANTUM_TICKS = 1000  # one scheduler quantum = 1 ms simulated

# Sentinel yielded (via sleep_on) by kernel code that must block.
BLOCK = object()


class TaskState(Enum):
    EMBRYO = "EMBRYO"
    RUNNABLE = "RUNNABLE"
    RUNNING = "RUNNING"
    SLEEPING = "SLEEPING"
    BLOCKED = "BLOCKED"
    ZOMBIE = "ZOMBIE"


class TaskKind(Enum):
    KERNEL_THREAD = "kernel"
    USER = "user"


class TaskKilled(Exception):
    """Thrown into a task's generator stack to unwind it for termination."""

    def __init__(self, exit_code):
        super().__init__(f"killed with exit code {exit_code}")
        self.exit_code = exit_code


class ResourceExhausted(SimError):
    code = Err.TASKS_EXHAUSTED


class Channel:
    """Sleep/wakeup rendezvous. Wakeup is broadcast; waiters retry."""

    def __init__(self, key):
        self.key = key
        self.waiters = OrderedDict()  # tid -> None, in arrival order

    def __repr__(self):
        return f"Channel({self.key!r})"


class Task:
    def __init__(self, tid, kind, name, priority, parent=0):
        self.tid = tid
        self.kind = kind
        self.name = name
        self.priority = max(1, priority)
        self.parent = parent
        self.state = TaskState.EMBRYO
        self.aspace = None
        self.fdtable = None
        self.cwd = "/"
        self.frames = []            # generator stack: [behavior, syscall handler?]
        self.exit_code = None
        self.exit_seq = None
        self.fault_record = (None, 0)
        self.home_core = 0
        self.wait_channel = None
        self.killed = False
        self.kill_code = 0
        self.pending_charge = 0
        self.resume_value = None
        self.registry_key = None
        self.argv = []
        self.argv_sp = None
        self.stack_top = 0
        self.yield_now = False
        self.pending_exec = None
        self.wake_seq = 0

    def kill(self, exit_code):
        self.killed = True
        self.kill_code = exit_code

    def charge(self, ticks):
        self.pending_charge += ticks

    def take_charge(self):
        c, self.pending_charge = self.pending_charge, 0
        return c

    def __repr__(self):
        return f"Task(tid={self.tid} {self.name} {self.state.name})"


@dataclass
class Core:
    id: int
    runqueue: deque = field(default_factory=deque)
    current: int = 0            # tid, 0 = idle
    irq_depth: int = 0
    pending_irqs: list = field(default_factory=list)
    busy_until: int = 0
    resume_value: object = None
    need_resched: bool = False
    quantum_left: int = 0
    # utilization accounting: 10 buckets of 10 ms each (100 ms window)
    util_buckets: deque = field(default_factory=lambda: deque([0], maxlen=10))
    bucket_start: int = 0

    def load(self):
        return len(self.runqueue) + (1 if self.current else 0)

    def account(self, start, end, busy):
        """Attribute [start, end) to utilization buckets (10 ms each)."""
        t = start
        while t < end:
            bucket_end = self.bucket_start + 10_000
            step = min(end, bucket_end) - t
            if busy:
                self.util_buckets[-1] += step
            t += step
            if t >= bucket_end:
                self.util_buckets.append(0)
                self.bucket_start = bucket_end

    def utilization(self, now):
        span = (len(self.util_buckets) - 1) * 10_000 + max(now - self.bucket_start, 0)
        if span <= 0:
            return 0
        return min(100, (100 * sum(self.util_buckets)) // span)


class SpinLock:
    """Simulated spinlock: masks interrupts while held, panics on reentry.

    Kernel sections run to completion between blocking points, so a held
    lock at acquire time is a lock-discipline bug, not contention.
    """

    def __init__(self, name, sched):
        self.name = name
        self.sched = sched
        self.holder = None

    def acquire(self, task=None):
        holder = task.tid if task else -1
        assert self.holder is None, (
            f"spinlock {self.name}: acquire while held by {self.holder} "
            f"(requested by {holder})"
        )
        self.sched.push_off(self.sched.cores[0] if task is None else
                            self.sched.cores[task.home_core])
        self.holder = holder

    def release(self, task=None):
        holder = task.tid if task else -1
        assert self.holder == holder, f"spinlock {self.name}: release by non-holder"
        self.holder = None
        self.sched.pop_off(self.sched.cores[0] if task is None else
                           self.sched.cores[task.home_core])

    def held_by(self, task):
        return self.holder == (task.tid if task else -1)


class Scheduler:
    def __init__(self, ncores, emit=None):
        self.cores = [Core(i) for i in range(ncores)]
        self.tasks = {}
        self._next_tid = 1
        self._exit_seq = 0
        self.sleepers = {}          # tid -> wake deadline
        self.emit = emit or (lambda *a, **k: None)
        self.on_unmask = None       # set by the kernel: drains pending IRQs

    # -- task lifecycle -------------------------------------------------------

    def create_task(self, kind, name, priority=1, parent=0):
        if len(self.tasks) >= MAX_TASKS:
            raise ResourceExhausted(f"task limit {MAX_TASKS} reached")
        task = Task(self._next_tid, kind, name, priority, parent)
        self._next_tid += 1
        self.tasks[task.tid] = task
        return task

    def make_runnable(self, task, core_id=None):
        """EMBRYO/woken task onto a runqueue (least-loaded for new tasks)."""
        if core_id is None:
            core_id = min(self.cores, key=lambda c: (c.load(), c.id)).id
        task.home_core = core_id
        task.state = TaskState.RUNNABLE
        self.cores[core_id].runqueue.append(task.tid)

    def reap(self, task):
        self.tasks.pop(task.tid, None)

    def mark_zombie(self, task, exit_code):
        task.state = TaskState.ZOMBIE
        task.exit_code = exit_code
        task.exit_seq = self._exit_seq
        self._exit_seq += 1
        task.frames.clear()
        if task.wait_channel is not None:
            task.wait_channel.waiters.pop(task.tid, None)
            task.wait_channel = None
        self.sleepers.pop(task.tid, None)
        for core in self.cores:
            if core.current == task.tid:
                core.current = 0
            if task.tid in core.runqueue:
                core.runqueue.remove(task.tid)

    # -- dispatch -------------------------------------------------------------

    def dispatch(self, core, now):
        """Pop the runqueue head onto the core. Returns the task or None."""
        while core.runqueue:
            tid = core.runqueue.popleft()
            task = self.tasks.get(tid)
            if task is None or task.state != TaskState.RUNNABLE:
                continue
            prev = core.current
            core.current = tid
            core.quantum_left = task.priority
            core.need_resched = False
            task.state = TaskState.RUNNING
            self.emit(TraceKind.SCHED_SWITCH, prev, tid, core=core.id)
            return task
        return None

    def preempt(self, core):
        """Move the running task to the runqueue tail (quantum expired)."""
        task = self.tasks[core.current]
        task.state = TaskState.RUNNABLE
        core.runqueue.append(task.tid)
        core.current = 0

    def timer_tick(self, core, now):
        """Per-core scheduler tick: wake due sleepers, burn one quantum."""
        for tid, deadline in list(self.sleepers.items()):
            if deadline <= now:
                self.wake_sleeper(tid)
        if core.current:
            core.quantum_left -= 1
            if core.quantum_left <= 0:
                core.need_resched = True

    # -- sleep / wakeup ---------------------------------------------------------

    def sleep_on(self, task, ch: Channel, guard: SpinLock = None,
                 state=TaskState.SLEEPING):
        """Park the caller on ch; guard (if given) is released atomically
        with the state change and re-acquired before return."""
        if guard is not None:
            assert guard.held_by(task), "sleep_on caller must hold the guard"
            guard.release(task)
        ch.waiters[task.tid] = None
        task.state = state
        task.wait_channel = ch
        yield BLOCK
        if guard is not None:
            guard.acquire(task)

    def sleep_until(self, task, deadline):
        """Timed sleep; a wake timer (or the tick sweep) ends it."""
        self.sleepers[task.tid] = deadline
        task.state = TaskState.SLEEPING
        yield BLOCK

    def wakeup(self, ch: Channel):
        """Broadcast: every waiter becomes RUNNABLE on its home core."""
        woken = 0
        for tid in list(ch.waiters):
            ch.waiters.pop(tid, None)
            task = self.tasks.get(tid)
            if task is None or task.state not in (TaskState.SLEEPING, TaskState.BLOCKED):
                continue
            task.wait_channel = None
            task.state = TaskState.RUNNABLE
            self.cores[task.home_core].runqueue.append(tid)
            woken += 1
        return woken

    def wake_sleeper(self, tid, seq=None):
        task = self.tasks.get(tid)
        if task is not None and seq is not None and task.wake_seq != seq:
            return  # stale wake timer from an earlier sleep
        self.sleepers.pop(tid, None)
        if task is None or task.state != TaskState.SLEEPING:
            return
        if task.wait_channel is not None:
            task.wait_channel.waiters.pop(tid, None)
            task.wait_channel = None
        task.state = TaskState.RUNNABLE
        self.cores[task.home_core].runqueue.append(tid)

    # -- interrupt masking -------------------------------------------------------

    def push_off(self, core):
        core.irq_depth += 1

    def pop_off(self, core):
        if core.irq_depth == 0:
            raise UnderflowPanic(f"pop_off at depth 0 on core {core.id}")
        core.irq_depth -= 1
        if core.irq_depth == 0 and core.pending_irqs and self.on_unmask:
            self.on_unmask(core)

    # -- introspection --------------------------------------------------------

    def ps_lines(self):
        lines = []
        for task in self.tasks.values():
            lines.append(
                f"{task.tid} {task.state.name} {task.home_core} {task.name}"
            )
        return lines

    def live_count(self):
        return len(self.tasks)
