"""The kernel proper: boot wiring, the deterministic event loop, and the
trampoline that runs task generators against the scheduler.

Time advances in hops: the loop finds the next interesting tick (hardware
deadline or a core finishing its current action), advances the hardware
exactly that far, delivers the raised IRQs (masked cores queue them, the
panic FIQ bypasses masking), then lets every core in ascending id order
do all the work available at that instant.

Tasks yield actions (Cpu, Sys, Fork, Clone, KWait); syscall handlers may
park on channels. Device time charges accumulate against the calling
task and are paid as busy time when its syscall completes.
"""

from . import pimg, userland
from .abi import Cpu, Clone, Fork, GuestContext, KWait, Sys
from .devio import DevIo
from .errors import BadImage, Err, NotFound, SimError
from .hwsim import Hardware, IrqKind, BlockDev, BlockCost
from .mem import MemoryManager
from .proc import SYSCALL_BASE_COST, SyscallTable, TaskExit
from .proc import exec_image as _load_program
from .profiles import get_profile
from .sched import (BLOCK, Channel, Scheduler, TaskKilled, TaskKind,
                    TaskState, QUANTUM_TICKS)
from .trace import TraceKind, TraceRing, panic_dump_text
from .vfs import (FdTable, Inode, KIND_DEVICE, O_RD, O_WR, OpenFile, Vfs)
from .wm import WindowManager, wm_thread

FRAME_PERIOD = 33_000   # demo animation timer for p1
EXIT_KILLED = 129       # sys_kill
RAMDISK_COST = BlockCost(per_op=1, per_sector=1)


class Kernel:
    EXIT_KILLED = EXIT_KILLED

    def __init__(self, profile="p5", seed=0, ramdisk=None, fat=None,
                 ncores=None, ramdisk_path=None, fat_path=None,
                 init_demo=True, fat_bypass=True):
        self.profile = get_profile(profile, ncores)
        self.hw = Hardware(seed=seed, ncores=self.profile.ncores)
        self.trace = TraceRing()
        self.sched = Scheduler(self.profile.ncores, emit=self._emit_sched)
        self.sched.on_unmask = self._drain_pending_irqs
        self.mem = MemoryManager(self.hw)
        self.syscalls = SyscallTable()
        self.registry = userland.build_registry()
        self.sems = {}
        self._sem_seq = 0
        self._wait_channels = {}
        self.wm = None
        self.vfs = None
        self.devio = None
        self._current_task = None
        self.last_panic = ""
        self.booted = False

        if self.profile.has_vfs:
            if ramdisk is None:
                raise BadImage("profile needs a ramdisk image")
            self.vfs = Vfs(self)
            # ramdisk writes live in RAM only; no path, never written back
            ramdev = self.hw.add_blockdev(
                "ram", BlockDev(ramdisk, cost=RAMDISK_COST))
            self.vfs.mount_root(ramdev)
            if self.profile.has_fat:
                if fat is not None:
                    fatdev = self.hw.add_blockdev("sd", BlockDev(fat, path=fat_path))
                    self.vfs.mount_fat(fatdev, use_bypass=fat_bypass)
            if self.profile.has_wm:
                self.wm = WindowManager(self)
            self.devio = DevIo(self)
            self.devio.register_devices(self.vfs)
        else:
            self.devio = DevIo(self)

        if self.profile.has_sched:
            for core in range(self.profile.ncores):
                self.hw.arm_timer(QUANTUM_TICKS, tag=("sched",),
                                  period=QUANTUM_TICKS, core=core)
        if self.profile.auto_flush and self.profile.level >= 2:
            # pre-fbctl profiles: the kernel flushes the framebuffer itself
            self.hw.arm_timer(FRAME_PERIOD, tag=("flush",),
                              period=FRAME_PERIOD, core=0)
        if init_demo:
            self._start_init()
        self.booted = True

    # -- boot-time task setup ----------------------------------------------------

    def _start_init(self):
        level = self.profile.level
        if level == 1:
            self._p1_state = userland.DonutState(donut_id=0, priority=1)
            self.hw.arm_timer(FRAME_PERIOD, tag=("frame",),
                              period=FRAME_PERIOD, core=0)
            return
        if level == 2:
            for i, prio in enumerate((1, 2, 3)):
                task = self.sched.create_task(TaskKind.KERNEL_THREAD,
                                              f"donut{i}", prio)
                ctx = GuestContext(self, task)
                task.frames = [userland.donut_kernel_task(ctx, i, prio)]
                self.sched.make_runnable(task)
            return
        if level == 3:
            self.spawn("donut", ["0", "1"])
            return
        self.devio.attach_console_renderer()
        if self.wm is not None:
            task = self.sched.create_task(TaskKind.KERNEL_THREAD, "wm", 1)
            task.frames = [wm_thread(self)]
            self.sched.make_runnable(task)
        self.spawn("shell", [])

    # -- registry / program loading -------------------------------------------------

    def spawn(self, name, args):
        """Start a registry program as a new task (ctl `spawn`, demo boots)."""
        info = userland.APPS.get(name)
        if info is None:
            raise NotFound(f"no program {name!r}")
        if self.profile.level < info.min_profile:
            raise BadImage(f"{name} needs profile p{info.min_profile}")
        task = self.sched.create_task(TaskKind.USER, name)
        task.fdtable = (self._console_fdtable() if self.vfs is not None
                        else FdTable())
        image = pimg.parse(name, info.image_bytes())
        _load_program(self, task, image, [name] + list(args))
        task.frames = [task.pending_exec]
        task.pending_exec = None
        self.sched.make_runnable(task)
        return task.tid

    def exec_image(self, task, image, argv):
        _load_program(self, task, image, argv)

    def _console_fdtable(self):
        t = FdTable()
        con = self.vfs.devices["console"]
        node = Inode("dev", KIND_DEVICE, handle=con, dev_id="console")
        t.install(OpenFile(node, O_RD))
        t.install(OpenFile(node, O_WR))
        t.install(OpenFile(node, O_WR))
        return t

    def read_file(self, path, cwd="/"):
        """Whole-file read without an fd (exec loader)."""
        if self.vfs is None:
            raise NotFound("no filesystem in this profile")
        node = self.vfs.resolve(path, cwd)
        if node.backend == "xv6fs":
            size = self.vfs.rootfs.read_inode(node.handle).size
            return self.vfs.rootfs.inode_read(node.handle, 0, size)
        if node.backend == "fatfs":
            return self.vfs.fatvol.read(node.handle, 0, node.handle.size)
        raise NotFound(path)

    # -- misc services -----------------------------------------------------------------

    def charge_current(self, ticks):
        if self._current_task is not None:
            self._current_task.charge(ticks)

    def next_sem_id(self):
        self._sem_seq += 1
        return self._sem_seq

    def wait_channel(self, tid):
        ch = self._wait_channels.get(tid)
        if ch is None:
            ch = self._wait_channels[tid] = Channel(("wait", tid))
        return ch

    def procfs_text(self, name):
        if name == "cpuinfo":
            now = self.hw.clock.now
            return "".join(f"core{c.id} util {c.utilization(now)}\n"
                           for c in self.sched.cores)
        if name == "meminfo":
            a = self.mem.allocator
            return f"pages free {a.free_pages} total {a.total_pages}\n"
        raise NotFound(f"/proc/{name}")

    def _emit_sched(self, kind, a, b, core=0):
        self.trace.emit(self.hw.clock.now, core, kind, a, b)

    def trace_fault(self, task, va):
        self.trace.emit(self.hw.clock.now, task.home_core, TraceKind.FAULT,
                        va, task.tid)

    # -- task termination -----------------------------------------------------------------

    def finish_exit(self, task, code):
        if task.state == TaskState.ZOMBIE:
            return
        if task.fdtable is not None:
            task.fdtable.share_count -= 1
            if task.fdtable.share_count == 0 and self.vfs is not None:
                for fd, of in enumerate(task.fdtable.slots):
                    if of is not None:
                        task.fdtable.slots[fd] = None
                        self.vfs.release_openfile(of)
        if task.aspace is not None:
            task.aspace.release()
            task.aspace = None
        if self.wm is not None:
            self.wm.destroy_surfaces_of(task.tid)
        for child in self.sched.tasks.values():
            if child.parent == task.tid:
                child.parent = 1
        self.sched.mark_zombie(task, code)
        self.sched.wakeup(self.wait_channel(task.parent))

    # -- trampoline ----------------------------------------------------------------------

    def _step_task(self, core, task):
        """Advance a task at an action boundary: resume its generator stack,
        interpret the next action, set the core busy accordingly."""
        value = task.resume_value
        task.resume_value = None
        throw = TaskKilled(task.kill_code) if task.killed else None
        self._current_task = task
        try:
            while True:
                gen = task.frames[-1]
                try:
                    act = gen.throw(throw) if throw is not None else gen.send(value)
                    throw = None
                    value = None
                except StopIteration as si:
                    task.frames.pop()
                    if not task.frames:
                        code = si.value if isinstance(si.value, int) else 0
                        self.finish_exit(task, code)
                        return
                    self._complete_syscall(core, task, si.value)
                    return
                except (TaskKilled, TaskExit) as e:
                    self.finish_exit(task, e.exit_code)
                    return
                except SimError as e:
                    if len(task.frames) > 1:
                        task.frames.pop()
                        self._complete_syscall(core, task, -int(e.code))
                        return
                    self.finish_exit(task, 1)
                    return

                if act is BLOCK:
                    core.current = 0
                    return
                if isinstance(act, Cpu):
                    core.busy_until = (self.hw.clock.now + max(1, act.ticks)
                                       + task.take_charge())
                    return
                if isinstance(act, KWait):
                    self._kwait(task, act)
                    core.current = 0
                    return
                if isinstance(act, (Sys, Fork, Clone)):
                    try:
                        result = self._begin_syscall(task, act)
                    except (TaskKilled, TaskExit) as e:
                        self.finish_exit(task, e.exit_code)
                        return
                    if hasattr(result, "send"):
                        task.frames.append(result)
                        continue
                    self._complete_syscall(core, task, result)
                    return
                raise AssertionError(f"task {task.tid} yielded {act!r}")
        finally:
            self._current_task = None

    def _begin_syscall(self, task, act):
        """Resolve the action to a handler; returns a value or a generator."""
        if isinstance(act, Fork):
            name, args = "fork", (act.child,)
        elif isinstance(act, Clone):
            name, args = "clone", (act.thread, act.stack_top, act.flags)
        else:
            name, args = act.name, act.args
        num, handler = self.syscalls.lookup(name)
        if handler is None:
            return -int(Err.NO_SYS)
        self.trace.emit(self.hw.clock.now, task.home_core,
                        TraceKind.SYSCALL_ENTER, num, task.tid)
        if task.kind == TaskKind.USER and not self.profile.allows(name):
            return -int(Err.NO_SYS)
        try:
            return handler(self, task, *args)
        except (TaskExit, TaskKilled):
            raise
        except SimError as e:
            return -int(e.code)

    def _complete_syscall(self, core, task, result):
        charge = SYSCALL_BASE_COST + task.take_charge()
        code = result if isinstance(result, int) else 0
        self.trace.emit(self.hw.clock.now, task.home_core,
                        TraceKind.SYSCALL_EXIT, task.tid, code & (2**64 - 1))
        core.busy_until = self.hw.clock.now + charge
        task.resume_value = result
        if task.pending_exec is not None:
            gen, task.pending_exec = task.pending_exec, None
            task.frames = [gen]
            task.resume_value = None

    def _kwait(self, task, act: KWait):
        """Kernel-thread wait: channel wakeup or deadline, whichever first."""
        core = self.sched.cores[task.home_core]
        if act.deadline <= self.hw.clock.now:
            # deadline already due: just yield the core
            task.state = TaskState.RUNNABLE
            core.runqueue.append(task.tid)
            return
        task.wake_seq += 1
        self.hw.arm_timer(act.deadline, tag=("wake", task.tid, task.wake_seq),
                          core=task.home_core)
        self.sched.sleepers[task.tid] = act.deadline
        act.channel.waiters[task.tid] = None
        task.wait_channel = act.channel
        task.state = TaskState.SLEEPING

    # -- core execution -----------------------------------------------------------------

    def _run_core(self, core):
        progressed = False
        while True:
            now = self.hw.clock.now
            if core.current == 0:
                task = self.sched.dispatch(core, now)
                if task is None:
                    return progressed
                core.busy_until = now
                progressed = True
                continue
            if core.busy_until > now:
                return progressed
            task = self.sched.tasks.get(core.current)
            if task is None or task.state == TaskState.ZOMBIE:
                core.current = 0
                continue
            if core.need_resched or task.yield_now:
                task.yield_now = False
                core.need_resched = False
                if core.runqueue:
                    self.sched.preempt(core)
                    progressed = True
                    continue
                core.quantum_left = task.priority
            self._step_task(core, task)
            progressed = True

    def _run_all_cores(self):
        while True:
            progressed = False
            for core in self.sched.cores:
                progressed |= self._run_core(core)
            if not progressed:
                return

    # -- interrupts --------------------------------------------------------------------

    def _deliver_irq(self, ev):
        core = self.sched.cores[ev.core]
        if ev.kind != IrqKind.FIQ_PANIC and core.irq_depth > 0:
            core.pending_irqs.append(ev)
            return
        self._handle_irq(core, ev)

    def _drain_pending_irqs(self, core):
        pending, core.pending_irqs = core.pending_irqs, []
        for ev in pending:
            self._handle_irq(core, ev)

    def _handle_irq(self, core, ev):
        self.trace.emit(self.hw.clock.now, core.id, TraceKind.IRQ,
                        int(ev.kind), ev.sub)
        if ev.kind == IrqKind.TIMER:
            tag = ev.tag or ("sched",)
            if tag[0] == "sched":
                self.sched.timer_tick(core, self.hw.clock.now)
            elif tag[0] == "wake":
                self.sched.wake_sleeper(tag[1], tag[2] if len(tag) > 2 else None)
            elif tag[0] == "frame":
                self._p1_frame()
            elif tag[0] == "flush":
                self.hw.fb.flush()
        elif ev.kind == IrqKind.KEYBOARD:
            self.devio.on_keyboard_irq()
        elif ev.kind == IrqKind.AUDIO_DMA:
            self.devio.on_audio_dma()
        elif ev.kind == IrqKind.FIQ_PANIC:
            self.last_panic = panic_dump_text(self, core.id)

    def _p1_frame(self):
        """Prototype 1: each frame is rendered by the timer interrupt."""
        state = self._p1_state
        userland.render_donut_to_fb(self.hw.fb, state)
        state.advance()
        self.hw.fb.flush()

    # -- the loop ---------------------------------------------------------------------------

    def step(self, ticks):
        """Advance simulated time by exactly `ticks`."""
        if ticks < 0:
            raise ValueError("negative step")
        target = self.hw.clock.now + ticks
        self._run_all_cores()
        while self.hw.clock.now < target:
            now = self.hw.clock.now
            t_next = target
            hw_next = self.hw.next_deadline()
            if hw_next is not None:
                t_next = min(t_next, hw_next)
            for core in self.sched.cores:
                if core.current and core.busy_until > now:
                    t_next = min(t_next, core.busy_until)
            t_next = max(now + 1, min(t_next, target))
            for core in self.sched.cores:
                core.account(now, t_next, busy=core.current != 0)
            events = self.hw.advance(t_next - now)
            for ev in events:
                self._deliver_irq(ev)
            self._run_all_cores()
        return self.hw.clock.now

    # -- operator surface (ctl) ---------------------------------------------------------------

    def inject_key(self, scancode, action, mods=()):
        self.hw.inject_key(scancode, action, mods)

    def screenshot(self, path):
        self.hw.fb.dump_ppm(path)

    def tracedump(self, n):
        return self.trace.dump_text(n)

    def ps_text(self):
        return "\n".join(self.sched.ps_lines())

    def panic(self):
        """Panic button: FIQ-sourced, round-robin across cores, unmaskable."""
        ev = self.hw.press_panic_button()
        self._handle_irq(self.sched.cores[ev.core], ev)
        return self.last_panic

    def shutdown(self):
        if self.vfs is not None:
            self.vfs.sync()
            for dev in self.hw.blockdevs.values():
                dev.save()

    def audit_pages(self):
        spaces = {id(t.aspace): t.aspace for t in self.sched.tasks.values()
                  if t.aspace is not None}
        return self.mem.audit(spaces.values())
