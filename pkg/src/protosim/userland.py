"""Guest programs: shell and utilities, the donut animation, sysmon, the
tone player, the event-loop demo and the multithreaded miner, plus the
user-level synchronization library built on semaphores.

Programs are generators over the action ABI. Their data (pixel buffers,
rings, shared counters, sprite positions) lives in simulated memory and
is reached only through translated access; host-level locals carry
control flow. Every behavior declares its compute cost in ticks so
scheduling and scaling measurements mean something.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import pimg
from .abi import Clone, Cpu, Fork, sc
from .devio import ACT_PRESS, EVENT_RECORD, EVENT_SIZE
from .mem import FB_APERTURE_VA, PAGE_SIZE
from .vfs import O_RD, O_WR, SEEK_SET

# compute cost model (ticks)
DONUT_FRAME_COST = 2000
HASH_COST = 2
SHELL_LINE_COST = 100
SYNTH_COST_PER_SAMPLE = 1

DONUT_W = 160
DONUT_H = 120

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
U64 = (1 << 64) - 1

CONFIG_MAGIC = 0xC0F1
RECT_MAGIC = 0x7EC7


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & U64
    return h


def fnv1a64_batch(prefix_hash: int, nonces: np.ndarray) -> np.ndarray:
    """Vectorized FNV-1a over prefix||nonce_le8 for a batch of nonces."""
    h = np.full(nonces.shape, prefix_hash, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for k in range(8):
        byte = (nonces >> np.uint64(8 * k)) & np.uint64(0xFF)
        h = (h ^ byte) * prime
    return h


# -- donut rendering (shared by every profile's demo) ---------------------------


@dataclass
class DonutState:
    donut_id: int
    priority: int
    iteration: int = 0

    def advance(self):
        self.iteration += 1

    @property
    def angle_a(self):
        return 0.04 * self.priority * self.iteration

    @property
    def angle_b(self):
        return 0.02 * self.priority * self.iteration


_DONUT_GRID = None


def _donut_grid():
    global _DONUT_GRID
    if _DONUT_GRID is None:
        theta = np.arange(0, 2 * math.pi, 0.07)
        phi = np.arange(0, 2 * math.pi, 0.02)
        _DONUT_GRID = np.meshgrid(theta, phi)
    return _DONUT_GRID


def render_donut(state: DonutState, w=DONUT_W, h=DONUT_H):
    """Classic two-angle luminance torus, rasterized to an RGBA frame.

    Pure function of (iteration, priority, id): the angles derive from the
    iteration count, the palette from the id.
    """
    a, b = state.angle_a, state.angle_b
    theta, phi = _donut_grid()
    r1, r2, k2 = 1.0, 2.0, 5.0
    k1 = w * k2 * 3 / (8 * (r1 + r2))
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    circlex = r2 + r1 * ct
    circley = r1 * st
    x = circlex * (cb * cp + sa * sb * sp) - circley * ca * sb
    y = circlex * (sb * cp - sa * cb * sp) + circley * ca * cb
    z = k2 + ca * circlex * sp + circley * sa
    ooz = 1.0 / z
    xp = (w / 2 + k1 * ooz * x).astype(np.int32)
    yp = (h / 2 - k1 * ooz * y * 0.75).astype(np.int32)
    lum = (cp * ct * sb - ca * ct * sp - sa * st
           + cb * (ca * st - ct * sa * sp))
    keep = (lum > 0) & (xp >= 0) & (xp < w) & (yp >= 0) & (yp < h)
    xp, yp = xp[keep], yp[keep]
    lum_k, ooz_k = lum[keep], ooz[keep]
    order = np.argsort(ooz_k, kind="stable")   # paint far-to-near
    xp, yp, lum_k = xp[order], yp[order], lum_k[order]
    shade = np.clip(lum_k * 180 + 40, 0, 255).astype(np.uint8)
    frame = np.zeros((h, w, 4), dtype=np.uint8)
    palette = [(1.0, 0.85, 0.4), (0.45, 1.0, 0.55), (0.55, 0.65, 1.0),
               (1.0, 0.55, 0.85)]
    cr, cg, cb_ = palette[state.donut_id % len(palette)]
    frame[yp, xp, 0] = (shade * cr).astype(np.uint8)
    frame[yp, xp, 1] = (shade * cg).astype(np.uint8)
    frame[yp, xp, 2] = (shade * cb_).astype(np.uint8)
    frame[yp, xp, 3] = 255
    return frame


def donut_origin(donut_id, fb_w, fb_h):
    x = (40 + donut_id * 180) % max(1, fb_w - DONUT_W)
    y = (40 + donut_id * 130) % max(1, fb_h - DONUT_H)
    return x, y


def render_donut_to_fb(fb, state: DonutState):
    x, y = donut_origin(state.donut_id, fb.width, fb.height)
    fb.shadow[y : y + DONUT_H, x : x + DONUT_W] = render_donut(state)


def donut_kernel_task(ctx, donut_id, priority):
    """Prototype 2 form: a kernel task per donut, drawing straight to the
    framebuffer and sleeping between frames."""
    state = DonutState(donut_id, priority)
    fb = ctx.kernel.hw.fb
    while True:
        yield Cpu(DONUT_FRAME_COST)
        render_donut_to_fb(fb, state)
        state.advance()
        yield sc("sleep", 33)


# -- small guest I/O helpers ---------------------------------------------------


def ualloc(ctx, nbytes):
    """Grow the heap and return the old break (start of the new region)."""
    va = yield sc("sbrk", (nbytes + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE)
    if va < 0:
        raise AssertionError("sbrk failed in guest")
    return va


def uwrite(ctx, fd, buf_va, data):
    ctx.mem.write(buf_va, data)
    n = yield sc("write", fd, buf_va, len(data))
    return n


def uprint(ctx, fd, buf_va, text):
    n = yield from uwrite(ctx, fd, buf_va, text.encode())
    return n


def uread(ctx, fd, buf_va, n):
    k = yield sc("read", fd, buf_va, n)
    if k <= 0:
        return k, b""
    return k, ctx.mem.read(buf_va, k)


# -- user-level synchronization (mutex + condvar over semaphores) -----------------


class UserMutex:
    """Mutual exclusion: a semaphore initialized to 1."""

    def __init__(self):
        self.sid = None

    def create(self, ctx):
        self.sid = yield sc("semcreate", 1)

    def lock(self, ctx):
        rv = yield sc("semwait", self.sid)
        assert rv == 0

    def unlock(self, ctx):
        yield sc("sempost", self.sid)


class UserCond:
    """Condition variable as a (count, semaphore) pair over a mutex.

    The waiter count lives in shared guest memory at count_va. One condvar
    serves one predicate; code with several wait conditions uses several
    condvars over the same mutex, which keeps wakeup tokens from being
    consumed by the wrong waiter.
    """

    def __init__(self, mutex: UserMutex, count_va):
        self.mutex = mutex
        self.count_va = count_va
        self.sid = None

    def create(self, ctx):
        self.sid = yield sc("semcreate", 0)
        ctx.mem.w32(self.count_va, 0)

    def wait(self, ctx):
        """Caller holds the mutex; releases it atomically with the sleep
        (the count is published before the unlock) and reacquires after."""
        ctx.mem.w32(self.count_va, ctx.mem.r32(self.count_va) + 1)
        yield from self.mutex.unlock(ctx)
        yield sc("semwait", self.sid)
        yield from self.mutex.lock(ctx)

    def signal(self, ctx):
        count = ctx.mem.r32(self.count_va)
        if count > 0:
            ctx.mem.w32(self.count_va, count - 1)
            yield sc("sempost", self.sid)


# -- applications ------------------------------------------------------------------


def app_donut(ctx):
    """Spinning torus; renders per profile: direct map (p3), /dev/fb (p4),
    or a WM surface (p5)."""
    argv = ctx.argv()
    donut_id = int(argv[1]) if len(argv) > 1 else 0
    priority = int(argv[2]) if len(argv) > 2 else 1
    ctx.task.priority = max(1, priority)
    state = DonutState(donut_id, priority)
    frame_bytes = DONUT_W * DONUT_H * 4
    buf = yield from ualloc(ctx, 2 * frame_bytes + 4096)
    profile = ctx.kernel.profile

    fb_fd = surf_fd = None
    fbw = ctx.kernel.hw.fb.width
    fbh = ctx.kernel.hw.fb.height
    x0, y0 = donut_origin(donut_id, fbw, fbh)
    if profile.has_wm:
        surf_fd = yield sc("open", "/dev/surface", O_WR)
        cfg = struct.pack("<HHHH", CONFIG_MAGIC, DONUT_W, DONUT_H, 0)
        yield from uwrite(ctx, surf_fd, buf + frame_bytes, cfg)
    elif profile.has_vfs:
        fb_fd = yield sc("open", "/dev/fb", O_WR)
        if fb_fd < 0:
            return 1

    while True:
        yield Cpu(DONUT_FRAME_COST)
        frame = render_donut(state)
        state.advance()
        ctx.mem.write(buf, frame.tobytes())
        if profile.direct_fb_map:
            # p3: blit through the identity-mapped framebuffer aperture
            for row in range(DONUT_H):
                line = ctx.mem.read(buf + row * DONUT_W * 4, DONUT_W * 4)
                ctx.mem.write(FB_APERTURE_VA + ((y0 + row) * fbw + x0) * 4, line)
        elif surf_fd is not None:
            head = struct.pack("<HHHHH", RECT_MAGIC, 0, 0, DONUT_W, DONUT_H)
            ctx.mem.write(buf + frame_bytes, head)
            ctx.mem.write(buf + frame_bytes + len(head), frame.tobytes())
            yield sc("write", surf_fd, buf + frame_bytes,
                     len(head) + frame_bytes)
        elif fb_fd is not None:
            for row in range(DONUT_H):
                off = ((y0 + row) * fbw + x0) * 4
                yield sc("lseek", fb_fd, off, SEEK_SET)
                yield sc("write", fb_fd, buf + row * DONUT_W * 4, DONUT_W * 4)
            yield sc("fbctl", 1, 0)  # FLUSH
        yield sc("sleep", 33)


def app_echo(ctx):
    argv = ctx.argv()
    buf = yield from ualloc(ctx, 4096)
    yield from uprint(ctx, 1, buf, " ".join(argv[1:]) + "\n")
    return 0


def app_cat(ctx):
    argv = ctx.argv()
    buf = yield from ualloc(ctx, 4096)
    status = 0
    for path in argv[1:]:
        fd = yield sc("open", path, O_RD)
        if fd < 0:
            yield from uprint(ctx, 1, buf, f"cat: {path}: error {-fd}\n")
            status = 1
            continue
        while True:
            yield Cpu(20)
            k, data = yield from uread(ctx, fd, buf, 512)
            if k <= 0:
                break
            yield sc("write", 1, buf, k)
        yield sc("close", fd)
    return status


def app_ls(ctx):
    argv = ctx.argv()
    target = argv[1] if len(argv) > 1 else "."
    buf = yield from ualloc(ctx, 4096)
    fd = yield sc("open", target, O_RD)
    if fd < 0:
        yield from uprint(ctx, 1, buf, f"ls: {target}: error {-fd}\n")
        return 1
    stat_va = buf + 2048
    yield sc("fstat", fd, stat_va)
    kind, _, _, _size = struct.unpack("<HHIQ", ctx.mem.read(stat_va, 16))
    if kind != 2:  # plain file: print its own entry
        yield from uprint(ctx, 1, buf, f"{target}\n")
        yield sc("close", fd)
        return 0
    while True:
        yield Cpu(20)
        k, data = yield from uread(ctx, fd, buf, 16 * 16)
        if k <= 0:
            break
        for off in range(0, k - k % 16, 16):
            inum, raw = struct.unpack_from("<H14s", data, off)
            name = raw.rstrip(b"\0").decode()
            if not name:
                continue
            yield from uprint(ctx, 1, buf + 1024, f"{name}\n")
    yield sc("close", fd)
    return 0


def _exec_child(path, args):
    def child(ctx):
        rv = yield sc("exec", path, [path.rsplit("/", 1)[-1]] + args)
        # only reached when exec failed
        buf = yield sc("sbrk", 4096)
        if buf >= 0:
            yield from uprint(ctx, 1, buf, f"{path}: not found\n")
        return 127
    return child


def _shell_run_line(ctx, buf, line):
    """Parse and run one command line; returns the child's exit code."""
    parts = line.split()
    if not parts or parts[0].startswith("#"):
        return 0
    yield Cpu(SHELL_LINE_COST)
    if parts[0] == "cd":
        rv = yield sc("chdir", parts[1] if len(parts) > 1 else "/")
        if rv < 0:
            yield from uprint(ctx, 1, buf, f"cd: error {-rv}\n")
            return 1
        return 0
    if parts[0] == "exit":
        return "exit"
    path = parts[0] if parts[0].startswith("/") else "/" + parts[0]
    pid = yield Fork(_exec_child(path, parts[1:]))
    if pid < 0:
        yield from uprint(ctx, 1, buf, f"fork failed: {-pid}\n")
        return 1
    while True:
        rv = yield sc("wait")
        if isinstance(rv, tuple):
            tid, code = rv
            if tid == pid:
                return code
        else:
            return 1


def app_shell(ctx):
    """Interactive from the console, or batch from a script file.

    Script mode stops at the first failing command and exits nonzero.
    """
    argv = ctx.argv()
    buf = yield from ualloc(ctx, 8192)
    if len(argv) > 1:
        fd = yield sc("open", argv[1], O_RD)
        if fd < 0:
            yield from uprint(ctx, 1, buf, f"sh: {argv[1]}: error {-fd}\n")
            return 1
        blob = bytearray()
        while True:
            k, data = yield from uread(ctx, fd, buf, 512)
            if k <= 0:
                break
            blob += data
        yield sc("close", fd)
        for line in blob.decode("utf-8", "replace").splitlines():
            code = yield from _shell_run_line(ctx, buf, line.strip())
            if code == "exit":
                return 0
            if code != 0:
                return code
        return 0
    while True:
        yield from uprint(ctx, 1, buf, "$ ")
        k, data = yield from uread(ctx, 0, buf, 256)
        if k < 0:
            return 1
        line = data.decode("utf-8", "replace").strip()
        code = yield from _shell_run_line(ctx, buf, line)
        if code == "exit":
            return 0
        if code not in (0, None):
            yield from uprint(ctx, 1, buf, f"[exit {code}]\n")


def app_sysmon(ctx):
    """CPU/memory bars on a floating translucent window, 10 Hz."""
    w, h = 220, 140
    buf = yield from ualloc(ctx, 4096 + 16 + w * h * 4)
    msg_va = buf + 4096
    surf_fd = yield sc("open", "/dev/surface", O_WR)
    if surf_fd < 0:
        return 1
    cfg = struct.pack("<HHHH", CONFIG_MAGIC, w, h, 1 | 2)  # FLOAT|ALPHA
    yield from uwrite(ctx, surf_fd, msg_va, cfg)
    while True:
        yield Cpu(300)
        cpu_fd = yield sc("open", "/proc/cpuinfo", O_RD)
        if cpu_fd < 0:
            return 1
        _, cpu_text = yield from uread(ctx, cpu_fd, buf, 512)
        yield sc("close", cpu_fd)
        mem_fd = yield sc("open", "/proc/meminfo", O_RD)
        _, mem_text = yield from uread(ctx, mem_fd, buf, 512)
        yield sc("close", mem_fd)

        utils = []
        for line in cpu_text.decode().splitlines():
            parts = line.split()
            if len(parts) == 3 and parts[1] == "util":
                utils.append(int(parts[2]))
        free = total = 1
        parts = mem_text.decode().split()
        if len(parts) >= 4:
            free, total = int(parts[2]), int(parts[4])

        frame = np.zeros((h, w, 4), dtype=np.uint8)
        frame[:, :] = (20, 20, 20, 255)
        bar_h = 16
        for i, util in enumerate(utils):
            y = 8 + i * (bar_h + 6)
            frame[y : y + bar_h, 4 : 4 + (w - 8) * util // 100] = (220, 90, 60, 255)
        used_frac = (total - free) / total if total else 0
        y = 8 + len(utils) * (bar_h + 6)
        frame[y : y + bar_h, 4 : 4 + int((w - 8) * used_frac)] = (80, 160, 220, 255)

        head = struct.pack("<HHHHH", RECT_MAGIC, 0, 0, w, h)
        ctx.mem.write(msg_va, head + frame.tobytes())
        yield sc("write", surf_fd, msg_va, len(head) + w * h * 4)
        yield sc("sleep", 100)


EVREC = struct.Struct("<BHIx")   # type u8, a u16, b u32, pad
EV_TICK = 1
EV_KEY = 2


def _evdemo_ticker(wfd):
    def ticker(ctx):
        buf = yield from ualloc(ctx, 4096)
        while True:
            yield sc("sleep", 33)
            ctx.mem.write(buf, EVREC.pack(EV_TICK, 0, 0))
            rv = yield sc("write", wfd, buf, EVREC.size)
            if rv < 0:
                return 0
    return ticker


def _evdemo_reader(wfd, src_path):
    def reader(ctx):
        buf = yield from ualloc(ctx, 4096)
        fd = yield sc("open", src_path, O_RD)
        if fd < 0:
            return 1
        while True:
            k = yield sc("read", fd, buf, EVENT_SIZE)
            if k < 0:
                return 1
            scancode, action, mods, tick = EVENT_RECORD.unpack(
                ctx.mem.read(buf, EVENT_SIZE))
            if action != ACT_PRESS:
                continue
            ctx.mem.write(buf + 64, EVREC.pack(EV_KEY, scancode, tick))
            rv = yield sc("write", wfd, buf + 64, EVREC.size)
            if rv < 0:
                return 0
    return reader


def app_evdemo(ctx):
    """The two-writers-one-pipe event loop: a timer child and a keyboard
    child share a pipe the main loop reads; keys move a sprite, ticks
    redraw it."""
    argv = ctx.argv()
    maxkeys = int(argv[1]) if len(argv) > 1 else 0
    buf = yield from ualloc(ctx, 8192)
    rv = yield sc("pipe")
    if not isinstance(rv, tuple):
        return 1
    rfd, wfd = rv
    src = "/dev/event1" if ctx.kernel.profile.has_wm else "/dev/events"
    if ctx.kernel.profile.has_wm:
        surf_fd = yield sc("open", "/dev/surface", O_WR)
        cfg = struct.pack("<HHHH", CONFIG_MAGIC, 64, 64, 0)
        yield from uwrite(ctx, surf_fd, buf + 4096, cfg)
    else:
        surf_fd = None
        fb_fd = yield sc("open", "/dev/fb", O_WR)
        if fb_fd < 0:
            return 1

    ticker_pid = yield Fork(_evdemo_ticker(wfd))
    reader_pid = yield Fork(_evdemo_reader(wfd, src))

    state_va = buf + 2048     # sprite x, keys seen, ticks seen, order ok
    ctx.mem.w32(state_va, 100)
    ctx.mem.w32(state_va + 4, 0)
    ctx.mem.w32(state_va + 8, 0)
    ctx.mem.w32(state_va + 12, 1)
    expected = None
    while True:
        k = yield sc("read", rfd, buf, EVREC.size)
        if k <= 0:
            break
        typ, a, b = EVREC.unpack(ctx.mem.read(buf, EVREC.size))
        if typ == EV_KEY:
            keys = ctx.mem.r32(state_va + 4) + 1
            ctx.mem.w32(state_va + 4, keys)
            if expected is not None and a != expected:
                ctx.mem.w32(state_va + 12, 0)
            expected = 4 + (a - 4 + 1) % 26 if 4 <= a < 30 else None
            x = ctx.mem.r32(state_va)
            ctx.mem.w32(state_va, x + 1)
            if maxkeys and keys >= maxkeys:
                break
        elif typ == EV_TICK:
            ctx.mem.w32(state_va + 8, ctx.mem.r32(state_va + 8) + 1)
            yield Cpu(50)
            x = ctx.mem.r32(state_va) % 576
            sprite = np.full((8, 8, 4), 255, dtype=np.uint8).tobytes()
            if surf_fd is not None:
                head = struct.pack("<HHHHH", RECT_MAGIC, x % 56, 28, 8, 8)
                ctx.mem.write(buf + 4096, head + sprite)
                yield sc("write", surf_fd, buf + 4096, len(head) + len(sprite))
            else:
                for row in range(8):
                    off = ((200 + row) * 640 + x) * 4
                    yield sc("lseek", fb_fd, off, SEEK_SET)
                    ctx.mem.write(buf + 4096, sprite[row * 32 : row * 32 + 32])
                    yield sc("write", fb_fd, buf + 4096, 32)
                yield sc("fbctl", 1, 0)
    keys = ctx.mem.r32(state_va + 4)
    ticks = ctx.mem.r32(state_va + 8)
    ok = ctx.mem.r32(state_va + 12)
    yield sc("kill", ticker_pid)
    yield sc("kill", reader_pid)
    yield sc("wait")
    yield sc("wait")
    yield from uprint(ctx, 1, buf + 1024,
                      f"evdemo keys={keys} ticks={ticks} order={ok}\n")
    return 0 if ok else 1


RING_SAMPLES = 2048
TONE_BLOCK = 256


def _tone_worker(mutex, notempty, notfull, base, sb_fd):
    def worker(ctx):
        data_va = base + 64
        scratch = yield from ualloc(ctx, TONE_BLOCK * 2)
        while True:
            yield from mutex.lock(ctx)
            while True:
                head = ctx.mem.r32(base + 16)
                tail = ctx.mem.r32(base + 20)
                done = ctx.mem.r32(base + 24)
                if head != tail or done:
                    break
                yield from notempty.wait(ctx)
            if head == tail and done:
                yield from mutex.unlock(ctx)
                return 0
            take = min(head - tail, TONE_BLOCK)
            start = tail % RING_SAMPLES
            take = min(take, RING_SAMPLES - start)
            # copy out under the lock, then free the slots
            ctx.mem.write(scratch, ctx.mem.read(data_va + start * 2, take * 2))
            ctx.mem.w32(base + 20, tail + take)
            yield from notfull.signal(ctx)
            yield from mutex.unlock(ctx)
            # stream outside the lock; /dev/sb provides the backpressure
            yield sc("write", sb_fd, scratch, take * 2)
    return worker


def app_tone(ctx):
    """Sine synth in the main thread, a cloned worker streaming to /dev/sb
    through a shared ring guarded by the user mutex/condvar library."""
    argv = ctx.argv()
    freq = int(argv[1]) if len(argv) > 1 else 440
    seconds = float(argv[2]) if len(argv) > 2 else 1.0
    throttle = len(argv) > 3 and argv[3] == "throttle"
    solo = len(argv) > 3 and argv[3] == "solo"
    rate = 22050
    total = int(rate * seconds)

    base = yield from ualloc(ctx, 64 + RING_SAMPLES * 2)
    stack = yield from ualloc(ctx, PAGE_SIZE)
    sb_fd = yield sc("open", "/dev/sb", O_RD | O_WR)
    if sb_fd < 0:
        return 1
    mutex = UserMutex()
    yield from mutex.create(ctx)
    notempty = UserCond(mutex, base + 0)
    notfull = UserCond(mutex, base + 4)
    yield from notempty.create(ctx)
    yield from notfull.create(ctx)
    ctx.mem.w32(base + 16, 0)  # head (samples written)
    ctx.mem.w32(base + 20, 0)  # tail (samples streamed)
    ctx.mem.w32(base + 24, 0)  # done flag
    data_va = base + 64

    if not solo:
        worker_tid = yield Clone(
            _tone_worker(mutex, notempty, notfull, base, sb_fd),
            stack + PAGE_SIZE)
        if worker_tid < 0:
            return 1

    produced = 0
    while produced < total:
        n = min(TONE_BLOCK, total - produced)
        t = np.arange(produced, produced + n)
        samples = (3000 * np.sin(2 * math.pi * freq * t / rate)).astype("<i2")
        yield Cpu(max(1, n * SYNTH_COST_PER_SAMPLE))
        if solo:
            ctx.mem.write(data_va, samples.tobytes())
            yield sc("write", sb_fd, data_va, n * 2)
            produced += n
        else:
            yield from mutex.lock(ctx)
            while True:
                head = ctx.mem.r32(base + 16)
                tail = ctx.mem.r32(base + 20)
                start = head % RING_SAMPLES
                room = RING_SAMPLES - (head - tail)
                if room >= n and start + n <= RING_SAMPLES:
                    break
                yield from notfull.wait(ctx)
            ctx.mem.write(data_va + start * 2, samples.tobytes())
            ctx.mem.w32(base + 16, head + n)
            produced += n
            yield from notempty.signal(ctx)
            yield from mutex.unlock(ctx)
        if throttle:
            yield sc("sleep", int(2000 * n / rate))
    if not solo:
        yield from mutex.lock(ctx)
        ctx.mem.w32(base + 24, 1)
        yield from notempty.signal(ctx)
        yield from mutex.unlock(ctx)
        yield sc("wait")
    status_va = base + 32
    yield sc("read", sb_fd, status_va, 8)
    underruns, _buffered = struct.unpack("<II", ctx.mem.read(status_va, 8))
    buf = yield from ualloc(ctx, 4096)
    yield from uprint(ctx, 1, buf,
                      f"tone underruns={underruns} produced={produced}\n")
    return 1 if underruns else 0


MINER_BATCH = 128  # hashes per shared-counter publication


def _miner_worker(span, base, header, difficulty, mutex_sid):
    def worker(ctx):
        prefix = fnv1a64(header)
        nonce, end = span
        threshold = (np.uint64(1 << (64 - difficulty))
                     if 0 < difficulty < 64 else np.uint64(0))
        while nonce < end:
            if ctx.mem.r32(base) or ctx.mem.r32(base + 4):  # stop or found
                return 0
            n = min(MINER_BATCH, end - nonce)
            batch = np.arange(nonce, nonce + n, dtype=np.uint64)
            yield Cpu(HASH_COST * n)
            hashes = fnv1a64_batch(prefix, batch)
            if difficulty > 0:
                hits = np.nonzero(hashes < threshold)[0] if difficulty < 64 \
                    else np.array([], dtype=np.int64)
            else:
                hits = np.array([0])
            yield sc("semwait", mutex_sid)
            ctx.mem.w64(base + 16, ctx.mem.r64(base + 16) + n)
            if len(hits) and not ctx.mem.r32(base + 4):
                ctx.mem.w32(base + 4, 1)
                ctx.mem.w64(base + 8, int(batch[hits[0]]))
            yield sc("sempost", mutex_sid)
            nonce += n
        return 0
    return worker


def app_miner(ctx):
    """Scan disjoint nonce ranges for FNV-1a(header||nonce) hashes with a
    difficulty's worth of leading zero bits; first find wins."""
    argv = ctx.argv()
    nthreads = int(argv[1]) if len(argv) > 1 else 1
    difficulty = int(argv[2]) if len(argv) > 2 else 8
    duration_ms = int(argv[3]) if len(argv) > 3 else 0
    header = (argv[4] if len(argv) > 4 else "blk0").encode()

    base = yield from ualloc(ctx, PAGE_SIZE)
    # layout: stop u32, found u32, nonce u64, hashes u64
    for off in (0, 4):
        ctx.mem.w32(base + off, 0)
    ctx.mem.w64(base + 8, 0)
    ctx.mem.w64(base + 16, 0)
    mutex_sid = yield sc("semcreate", 1)
    stacks = yield from ualloc(ctx, nthreads * PAGE_SIZE)

    start = yield sc("uptime")
    tids = []
    chunk = (1 << 32) // nthreads
    for i in range(nthreads):
        span = (i * chunk, (i + 1) * chunk if i < nthreads - 1 else 1 << 32)
        tid = yield Clone(_miner_worker(span, base, header, difficulty,
                                        mutex_sid),
                          stacks + (i + 1) * PAGE_SIZE)
        if tid < 0:
            return 1
        tids.append(tid)

    if duration_ms:
        yield sc("sleep", duration_ms)
        ctx.mem.w32(base, 1)
    else:
        while not ctx.mem.r32(base + 4):
            yield sc("sleep", 5)
    for _ in tids:
        yield sc("wait")
    elapsed = (yield sc("uptime")) - start
    hashes = ctx.mem.r64(base + 16)
    found = ctx.mem.r32(base + 4)
    nonce = ctx.mem.r64(base + 8)
    buf = yield from ualloc(ctx, 4096)
    yield from uprint(
        ctx, 1, buf,
        f"miner found={found} nonce={nonce} hashes={hashes} elapsed={elapsed}\n")
    return 0 if (found or duration_ms) else 2


def app_keylat(ctx):
    """Input-path latency probe: timestamps blocking event reads."""
    argv = ctx.argv()
    count = int(argv[1]) if len(argv) > 1 else 1
    buf = yield from ualloc(ctx, 4096)
    if ctx.kernel.profile.has_wm:
        surf_fd = yield sc("open", "/dev/surface", O_WR)
        cfg = struct.pack("<HHHH", CONFIG_MAGIC, 8, 8, 0)
        yield from uwrite(ctx, surf_fd, buf, cfg)
        src = "/dev/event1"
    else:
        src = "/dev/events"
    fd = yield sc("open", src, O_RD)
    if fd < 0:
        return 1
    seen = 0
    while seen < count:
        k = yield sc("read", fd, buf, EVENT_SIZE)
        if k < 0:
            return 1
        now = yield sc("uptime")
        scancode, action, mods, tick = EVENT_RECORD.unpack(
            ctx.mem.read(buf, EVENT_SIZE))
        if action != ACT_PRESS:
            continue
        lat = (now - tick) & 0xFFFFFFFF
        yield from uprint(ctx, 1, buf + 1024, f"lat {lat}\n")
        seen += 1
    return 0


def _deadlock_second(sem_a, sem_b):
    def second(ctx):
        yield sc("semwait", sem_b)
        yield sc("sleep", 50)
        yield sc("semwait", sem_a)   # never returns: classic AB/BA
        yield sc("sempost", sem_a)
        return 0
    return second


def app_deadlock(ctx):
    """Constructs an AB/BA semaphore deadlock (panic-button demo)."""
    sem_a = yield sc("semcreate", 1)
    sem_b = yield sc("semcreate", 1)
    stack = yield from ualloc(ctx, PAGE_SIZE)
    yield Clone(_deadlock_second(sem_a, sem_b), stack + PAGE_SIZE)
    yield sc("semwait", sem_a)
    yield sc("sleep", 50)
    yield sc("semwait", sem_b)   # never returns
    yield sc("sempost", sem_b)
    return 0


def app_fault(ctx):
    """Touches memory per argv: demand-grows the stack or double-faults."""
    argv = ctx.argv()
    mode = argv[1] if len(argv) > 1 else "stack"
    if mode == "stack":
        pages = int(argv[2]) if len(argv) > 2 else 8
        top = 0x8000_0000 - PAGE_SIZE
        for i in range(1, pages + 1):
            yield Cpu(10)
            ctx.mem.write(top - i * PAGE_SIZE, b"S")
        return 0
    if mode == "wild":
        yield Cpu(10)
        ctx.mem.write(0xDEAD0000, b"X")
        return 0
    if mode == "code":
        yield Cpu(10)
        ctx.mem.write(0x1000, b"X")  # first fault: retry; second: kill
        return 0
    return 2


@dataclass(frozen=True)
class AppInfo:
    name: str
    factory: object
    min_profile: int
    min_argv: int = 0

    def image_bytes(self):
        return pimg.default_app_image(self.name, min_argv=self.min_argv)


APPS = {
    "shell": AppInfo("shell", app_shell, 4),
    "echo": AppInfo("echo", app_echo, 4),
    "cat": AppInfo("cat", app_cat, 4),
    "ls": AppInfo("ls", app_ls, 4),
    "donut": AppInfo("donut", app_donut, 3),
    "sysmon": AppInfo("sysmon", app_sysmon, 5),
    "evdemo": AppInfo("evdemo", app_evdemo, 4),
    "tone": AppInfo("tone", app_tone, 5),
    "miner": AppInfo("miner", app_miner, 5),
    "keylat": AppInfo("keylat", app_keylat, 4),
    "deadlock": AppInfo("deadlock", app_deadlock, 5),
    "fault": AppInfo("fault", app_fault, 3),
}


def build_registry():
    return {name: info.factory for name, info in APPS.items()}


def ramdisk_manifest(extra_files=()):
    """The shipped root filesystem: every app image plus a few text files."""
    entries = [("/" + name, info.image_bytes()) for name, info in APPS.items()]
    entries.append(("/README", b"protosim root filesystem\n"))
    entries.append(("/demo.sh", b"echo demo start\nls /\necho demo end\n"))
    entries.extend(extra_files)
    return entries
