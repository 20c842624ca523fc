"""Syscall dispatch (28 entries, stable numbering) and task-lifecycle
syscalls: fork, exec, exit, wait, clone, sleep, semaphores.

Handlers take (kernel, task, *args) and either return a value or are
generators that may park on channels. Failures surface to guests as
negative error codes; kernel-internal SimErrors are translated at the
dispatch boundary.

Three categories: task management (fork..exec), filesystem (open..pipe),
threading/sync (clone..semfree), plus fbctl carrying the framebuffer
flush/geometry requests. The category split and the total of 28 are the
stable interface; the individual names are this project's choice.
"""

import struct

from .abi import CLONE_VM, GuestContext, GuestMemory
from .errors import BadImage, Err, OutOfMemory, SimError
from .mem import PAGE_SHIFT, PAGE_SIZE, PERM_R, PERM_W, STACK_TOP, translate
from .sched import Channel, TaskKind, TaskState
from . import pimg

SYSCALL_BASE_COST = 3  # ticks: trap+dispatch overhead charged per syscall


class TaskExit(Exception):
    def __init__(self, exit_code):
        super().__init__(f"exit({exit_code})")
        self.exit_code = exit_code


class Semaphore:
    def __init__(self, sid, initial):
        self.sid = sid
        self.value = initial
        self.channel = Channel(("sem", sid))
        self.posts = 0
        self.waits = 0

    @property
    def waiters(self):
        return len(self.channel.waiters)


# -- task management ------------------------------------------------------------


def sys_fork(kernel, task, child_factory):
    if task.kind != TaskKind.USER:
        return -int(Err.INVALID)
    try:
        child = kernel.sched.create_task(TaskKind.USER, task.name, task.priority,
                                         parent=task.tid)
    except SimError as e:
        return -int(e.code)
    try:
        child.aspace = kernel.mem.as_fork(task.aspace)
    except OutOfMemory:
        kernel.sched.reap(child)
        return -int(Err.NO_MEM)
    child.fdtable = task.fdtable.dup_all()
    child.cwd = task.cwd
    child.argv = list(task.argv)
    child.argv_sp = task.argv_sp
    child.registry_key = task.registry_key
    child.frames = [child_factory(GuestContext(kernel, child))]
    kernel.sched.make_runnable(child)
    return child.tid


def sys_exit(kernel, task, code=0):
    raise TaskExit(int(code))


def sys_wait(kernel, task):
    while True:
        children = [t for t in kernel.sched.tasks.values() if t.parent == task.tid]
        if not children:
            return -int(Err.NO_CHILDREN)
        zombies = sorted((t for t in children if t.state == TaskState.ZOMBIE),
                         key=lambda t: t.exit_seq)
        if zombies:
            z = zombies[0]
            kernel.sched.reap(z)
            return (z.tid, z.exit_code)
        yield from kernel.sched.sleep_on(task, kernel.wait_channel(task.tid),
                                         state=TaskState.SLEEPING)


def sys_kill(kernel, task, tid):
    target = kernel.sched.tasks.get(tid)
    if target is None or target.state == TaskState.ZOMBIE:
        return -int(Err.INVALID)
    target.kill(kernel.EXIT_KILLED)
    if target.state in (TaskState.SLEEPING, TaskState.BLOCKED):
        if target.wait_channel is not None:
            target.wait_channel.waiters.pop(target.tid, None)
            target.wait_channel = None
        kernel.sched.sleepers.pop(target.tid, None)
        target.state = TaskState.RUNNABLE
        kernel.sched.cores[target.home_core].runqueue.append(target.tid)
    return 0


def sys_getpid(kernel, task):
    return task.tid


def sys_sleep(kernel, task, ms):
    ms = max(0, int(ms))
    if ms == 0:
        task.yield_now = True
        return 0
    deadline = kernel.hw.clock.now + ms * 1000
    task.wake_seq += 1
    kernel.hw.arm_timer(deadline, tag=("wake", task.tid, task.wake_seq),
                        core=task.home_core)
    yield from kernel.sched.sleep_until(task, deadline)
    return 0


def sys_uptime(kernel, task):
    return kernel.hw.clock.now


def sys_sbrk(kernel, task, delta):
    return kernel.mem.sbrk(task, int(delta))


def sys_exec(kernel, task, path, argv):
    blob = kernel.read_file(path, task.cwd)
    image = pimg.parse(path.rsplit("/", 1)[-1], blob)
    kernel.exec_image(task, image, list(argv))
    return 0


# -- filesystem ---------------------------------------------------------------------


def sys_open(kernel, task, path, flags):
    return kernel.vfs.open(task, path, flags)


def sys_close(kernel, task, fd):
    return kernel.vfs.close(task, fd)


def sys_read(kernel, task, fd, va, n):
    data = yield from kernel.vfs.read(task, fd, n)
    if data:
        GuestMemory(kernel, task).write(va, data)
    return len(data)


def sys_write(kernel, task, fd, va, n):
    if not kernel.profile.has_vfs:
        # pre-VFS profiles hardwire write() to the UART console
        data = GuestMemory(kernel, task).read(va, n)
        kernel.hw.uart_write(data)
        return n
    data = GuestMemory(kernel, task).read(va, n)
    result = yield from kernel.vfs.write(task, fd, data)
    return result


def sys_lseek(kernel, task, fd, off, whence):
    return kernel.vfs.lseek(task, fd, off, whence)


def sys_dup(kernel, task, fd):
    return kernel.vfs.dup(task, fd)


def sys_fstat(kernel, task, fd, va):
    record = kernel.vfs.fstat(task, fd)
    GuestMemory(kernel, task).write(va, record)
    return 0


def sys_mkdir(kernel, task, path):
    return kernel.vfs.mkdir(task, path)


def sys_chdir(kernel, task, path):
    return kernel.vfs.chdir(task, path)


def sys_unlink(kernel, task, path):
    return kernel.vfs.unlink(task, path)


def sys_link(kernel, task, old, new):
    return kernel.vfs.link(task, old, new)


def sys_mknod(kernel, task, path, dev_name):
    return kernel.vfs.mknod(task, path, dev_name)


def sys_pipe(kernel, task):
    return kernel.vfs.pipe_create(task)


# -- threading / synchronization -------------------------------------------------------


def sys_clone(kernel, task, thread_factory, stack_top, flags):
    if flags != CLONE_VM:
        return -int(Err.INVALID)
    probe = translate(task.aspace, stack_top - 8, PERM_W)
    if hasattr(probe, "va"):
        return -int(Err.BAD_ADDRESS)
    try:
        child = kernel.sched.create_task(TaskKind.USER, task.name + "+",
                                         task.priority, parent=task.tid)
    except SimError as e:
        return -int(e.code)
    child.aspace = kernel.mem.as_share(task.aspace)
    task.fdtable.share_count += 1
    child.fdtable = task.fdtable
    child.cwd = task.cwd
    child.argv = list(task.argv)
    child.argv_sp = task.argv_sp
    child.registry_key = task.registry_key
    child.stack_top = stack_top
    child.frames = [thread_factory(GuestContext(kernel, child))]
    kernel.sched.make_runnable(child)
    return child.tid


def sys_semcreate(kernel, task, initial):
    if initial < 0:
        return -int(Err.INVALID)
    sid = kernel.next_sem_id()
    kernel.sems[sid] = Semaphore(sid, int(initial))
    return sid


def sys_semwait(kernel, task, sid):
    sem = kernel.sems.get(sid)
    if sem is None:
        return -int(Err.INVALID)
    while sem.value == 0:
        yield from kernel.sched.sleep_on(task, sem.channel,
                                         state=TaskState.BLOCKED)
        if kernel.sems.get(sid) is not sem:
            return -int(Err.INVALID)
    sem.value -= 1
    sem.waits += 1
    return 0


WAKE_COST = 100  # ticks a post pays per woken waiter (waiter scan + IPI)


def sys_sempost(kernel, task, sid):
    sem = kernel.sems.get(sid)
    if sem is None:
        return -int(Err.INVALID)
    sem.value += 1
    sem.posts += 1
    woken = kernel.sched.wakeup(sem.channel)
    if woken:
        task.charge(WAKE_COST * woken)
    return 0


def sys_semfree(kernel, task, sid):
    sem = kernel.sems.get(sid)
    if sem is None:
        return -int(Err.INVALID)
    if sem.waiters:
        return -int(Err.BUSY)
    del kernel.sems[sid]
    return 0


# -- devices ------------------------------------------------------------------------------


def sys_fbctl(kernel, task, op, va=0):
    data = kernel.devio.fbdev.ctl(kernel, op)
    if data and va:
        GuestMemory(kernel, task).write(va, data)
    return 0


class SyscallTable:
    """Exactly 28 entries; numbers are stable across runs and releases."""

    ROSTER = (
        ("fork", sys_fork),
        ("exit", sys_exit),
        ("wait", sys_wait),
        ("kill", sys_kill),
        ("getpid", sys_getpid),
        ("sleep", sys_sleep),
        ("uptime", sys_uptime),
        ("sbrk", sys_sbrk),
        ("exec", sys_exec),
        ("open", sys_open),
        ("close", sys_close),
        ("read", sys_read),
        ("write", sys_write),
        ("lseek", sys_lseek),
        ("dup", sys_dup),
        ("fstat", sys_fstat),
        ("mkdir", sys_mkdir),
        ("chdir", sys_chdir),
        ("unlink", sys_unlink),
        ("link", sys_link),
        ("mknod", sys_mknod),
        ("pipe", sys_pipe),
        ("clone", sys_clone),
        ("semcreate", sys_semcreate),
        ("semwait", sys_semwait),
        ("sempost", sys_sempost),
        ("semfree", sys_semfree),
        ("fbctl", sys_fbctl),
    )

    def __init__(self):
        self.entries = {num: handler for num, (_, handler) in enumerate(self.ROSTER)}
        self.names = [name for name, _ in self.ROSTER]
        self.numbers = {name: num for num, name in enumerate(self.names)}
        assert len(self.entries) == 28

    def lookup(self, name_or_num):
        if isinstance(name_or_num, str):
            num = self.numbers.get(name_or_num)
        else:
            num = name_or_num if name_or_num in self.entries else None
        if num is None:
            return None, None
        return num, self.entries[num]


# -- exec loader --------------------------------------------------------------------------


def build_argv_block(argv):
    """Pack [argc][argv pointers][strings] as placed just below the stack top.

    Returns (block_bytes, sp) where sp is the address of argc.
    """
    strings = [a.encode() + b"\0" for a in argv]
    total_str = sum(len(s) for s in strings)
    str_base = STACK_TOP - total_str
    ptrs = []
    at = str_base
    for s in strings:
        ptrs.append(at)
        at += len(s)
    header = struct.pack("<Q", len(argv)) + b"".join(
        struct.pack("<Q", p) for p in ptrs)
    sp = (str_base - len(header)) & ~0xF
    pad = str_base - (sp + len(header))
    block = header + b"\0" * pad + b"".join(strings)
    return block, sp


def exec_image(kernel, task, image: pimg.ProgramImage, argv):
    """Replace the task's user image. Fully builds the new address space
    before touching the old one, so failures leave the caller intact."""
    factory = kernel.registry.get(image.registry_key)
    if factory is None:
        raise BadImage(f"unknown registry key {image.registry_key!r}")

    new_as = kernel.mem.new_aspace()
    try:
        for seg in image.segments:
            npages = -(-max(len(seg.data), 1) // PAGE_SIZE)
            base = seg.va >> PAGE_SHIFT
            for i in range(npages):
                kernel.mem.map_fresh(new_as, base + i, seg.perms, zero=True)
            if seg.data:
                _as_write(kernel, new_as, seg.va, seg.data)
        lo, hi = image.code_bounds()
        new_as.regions.code_lo = lo
        new_as.regions.code_hi = -(-hi // PAGE_SIZE) * PAGE_SIZE
        new_as.regions.heap_brk = new_as.regions.code_hi
        # one demand-paged stack page, premapped at the top
        kernel.mem.map_fresh(new_as, (STACK_TOP - PAGE_SIZE) >> PAGE_SHIFT,
                             PERM_R | PERM_W, zero=True)
        block, sp = build_argv_block(argv)
        _as_write(kernel, new_as, sp, block)
        if kernel.profile.direct_fb_map:
            kernel.mem.map_fb_aperture(new_as)
    except OutOfMemory:
        new_as.release()
        raise

    if task.aspace is not None:
        task.aspace.release()
    task.aspace = new_as
    task.fault_record = (None, 0)
    task.name = image.name
    task.argv = list(argv)
    task.argv_sp = sp
    task.registry_key = image.registry_key
    ctx = GuestContext(kernel, task)
    task.pending_exec = factory(ctx)


def _as_write(kernel, aspace, va, data):
    """Write into a freshly built address space (no fault handling)."""
    i = 0
    while i < len(data):
        pa = translate(aspace, va + i, access=0)
        assert not hasattr(pa, "va"), "loader wrote an unmapped page"
        chunk = min(len(data) - i, PAGE_SIZE - ((va + i) % PAGE_SIZE))
        kernel.mem.phys_write(pa, data[i : i + chunk])
        i += chunk
