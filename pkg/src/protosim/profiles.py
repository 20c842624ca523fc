"""Boot profiles p1..p5: the staged feature sets the simulator can come up
with, each level strictly containing the previous.

p1  bare hardware: framebuffer, UART, timers; a single kernel context
    renders the demo frame inside the timer interrupt handler.
p2  multitasking: scheduler, sleep, kernel tasks (one per demo donut).
p3  user/kernel split: VM, demand-paged stacks, five syscalls
    (fork, exit, sbrk, sleep, write hardwired to the UART).
p4  files: VFS + ramdisk fs, device files, pipes, the full fs syscall set.
p5  desktop: FAT32 under /d, clone+semaphores, four cores, window manager,
    non-blocking IO.
"""

from dataclasses import dataclass, replace

P3_SYSCALLS = frozenset({"fork", "exit", "sbrk", "sleep", "write"})
P4_SYSCALLS = P3_SYSCALLS | {
    "wait", "kill", "getpid", "uptime", "exec", "open", "close", "read",
    "lseek", "dup", "fstat", "mkdir", "chdir", "unlink", "link", "mknod",
    "pipe", "fbctl",
}
P5_SYSCALLS = P4_SYSCALLS | {"clone", "semcreate", "semwait", "sempost",
                             "semfree"}


@dataclass(frozen=True)
class Profile:
    name: str
    level: int
    ncores: int
    has_sched: bool
    has_vm: bool
    has_vfs: bool
    has_fat: bool
    has_wm: bool
    has_nonblock: bool
    direct_fb_map: bool      # exec identity-maps the framebuffer aperture
    auto_flush: bool         # kernel flushes the framebuffer on timer ticks
    syscalls: frozenset = frozenset()

    def allows(self, syscall_name):
        return syscall_name in self.syscalls


PROFILES = {
    "p1": Profile("p1", 1, 1, has_sched=False, has_vm=False, has_vfs=False,
                  has_fat=False, has_wm=False, has_nonblock=False,
                  direct_fb_map=False, auto_flush=True),
    "p2": Profile("p2", 2, 1, has_sched=True, has_vm=False, has_vfs=False,
                  has_fat=False, has_wm=False, has_nonblock=False,
                  direct_fb_map=False, auto_flush=True),
    "p3": Profile("p3", 3, 1, has_sched=True, has_vm=True, has_vfs=False,
                  has_fat=False, has_wm=False, has_nonblock=False,
                  direct_fb_map=True, auto_flush=True,
                  syscalls=P3_SYSCALLS),
    "p4": Profile("p4", 4, 1, has_sched=True, has_vm=True, has_vfs=True,
                  has_fat=False, has_wm=False, has_nonblock=False,
                  direct_fb_map=False, auto_flush=False,
                  syscalls=P4_SYSCALLS),
    "p5": Profile("p5", 5, 4, has_sched=True, has_vm=True, has_vfs=True,
                  has_fat=True, has_wm=True, has_nonblock=True,
                  direct_fb_map=False, auto_flush=False,
                  syscalls=P5_SYSCALLS),
}


def get_profile(name, ncores=None):
    prof = PROFILES.get(name)
    if prof is None:
        raise KeyError(name)
    if ncores:
        prof = replace(prof, ncores=ncores)
    return prof
