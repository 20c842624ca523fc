"""Simulated hardware: tick clock, virtual timers, interrupt routing, block
devices, framebuffer, keyboard source, and the audio sink.

Everything here is deterministic. One tick is one simulated microsecond.
The only entry point that moves time is Hardware.advance(); it converts
expired timers, due key events and audio drain thresholds into interrupt
events, ordered by (tick, line id, sub id).

Uninitialized DRAM is not zeroed: page contents come from a seeded
generator, reproducing the garbage-memory hazard of real boards while
staying bit-reproducible.
"""

import heapq
import random
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import IoError, OutOfRange, QueueFull

TICKS_PER_MS = 1000
SECTOR_SIZE = 512

# Framebuffer defaults (RGBA8888).
FB_WIDTH = 640
FB_HEIGHT = 480
FB_BPP = 4

AUDIO_RATE = 22050           # samples per simulated second
AUDIO_FIFO_CAP = 1024        # hardware-side sample fifo
KEY_INJECT_CAP = 4096        # undelivered host-injected key events

TICKS_PER_SEC = 1_000_000


class IrqKind(IntEnum):
    """Interrupt lines; the value doubles as the equal-deadline tie-break id."""

    TIMER = 0
    BLOCK = 1
    KEYBOARD = 2
    AUDIO_DMA = 3
    FIQ_PANIC = 4


@dataclass(frozen=True)
class IrqEvent:
    kind: IrqKind
    core: int           # delivery target
    tick: int           # when the line was raised
    tag: object = None  # timer tag etc.
    sub: int = 0        # tie-break below kind (timer id)

    def sort_key(self):
        return (self.tick, int(self.kind), self.sub)


class SimClock:
    """Monotonic tick counter plus the ordered set of pending timer deadlines."""

    def __init__(self):
        self.now = 0
        self._heap = []          # (deadline, timer_id, tag, period)
        self._next_id = 1
        self._cancelled = set()

    def arm(self, deadline, tag=None, period=0):
        """Arm a virtual timer; returns its id. period > 0 re-arms forever."""
        if deadline < self.now:
            raise ValueError("deadline in the past")
        tid = self._next_id
        self._next_id += 1
        heapq.heappush(self._heap, (deadline, tid, tag, period))
        return tid

    def cancel(self, timer_id):
        self._cancelled.add(timer_id)

    def next_deadline(self):
        while self._heap and self._heap[0][1] in self._cancelled:
            self._cancelled.discard(heapq.heappop(self._heap)[1])
        return self._heap[0][0] if self._heap else None

    def pop_due(self, upto):
        """Pop (deadline, id, tag) for every live timer with deadline <= upto."""
        due = []
        while self._heap:
            deadline, tid, tag, period = self._heap[0]
            if deadline > upto:
                break
            heapq.heappop(self._heap)
            if tid in self._cancelled:
                self._cancelled.discard(tid)
                continue
            due.append((deadline, tid, tag))
            if period > 0:
                heapq.heappush(self._heap, (deadline + period, tid, tag, period))
        return due


class Ram:
    """Simulated DRAM, allocated page-by-page on first touch.

    Page contents derive from (seed, page number), so garbage is identical
    across runs regardless of allocation order.
    """

    PAGE = 4096

    def __init__(self, total_pages, seed):
        self.total_pages = total_pages
        self.seed = seed
        self._pages = {}

    def page(self, pn) -> bytearray:
        buf = self._pages.get(pn)
        if buf is None:
            rng = random.Random((self.seed << 24) ^ pn)
            buf = bytearray(rng.randbytes(self.PAGE))
            self._pages[pn] = buf
        return buf

    def zero_page(self, pn):
        self._pages[pn] = bytearray(self.PAGE)


@dataclass
class BlockCost:
    per_op: int = 400
    per_sector: int = 3

    def cost(self, sectors):
        return self.per_op + sectors * self.per_sector


class BlockDev:
    """Byte store with 512-byte sectors; synchronous, polled, range-capable.

    A single op of n sectors costs per_op + n*per_sector ticks, so ranged
    transfers amortize the per-op charge.
    """

    def __init__(self, image: bytes = b"", size_sectors=None, cost=None, path=None):
        if size_sectors is None:
            size_sectors = (len(image) + SECTOR_SIZE - 1) // SECTOR_SIZE
        self.size_sectors = size_sectors
        self.data = bytearray(size_sectors * SECTOR_SIZE)
        self.data[: len(image)] = image
        self.cost_model = cost or BlockCost()
        self.path = path
        self.ops = 0
        self.ticks_charged = 0

    def _check(self, lba, count):
        if count < 1 or lba < 0 or lba + count > self.size_sectors:
            raise OutOfRange(f"lba={lba} count={count} size={self.size_sectors}")

    def read(self, lba, count):
        """Returns (bytes, cost_ticks)."""
        self._check(lba, count)
        self.ops += 1
        cost = self.cost_model.cost(count)
        self.ticks_charged += cost
        off = lba * SECTOR_SIZE
        return bytes(self.data[off : off + count * SECTOR_SIZE]), cost

    def write(self, lba, count, data):
        self._check(lba, count)
        if len(data) != count * SECTOR_SIZE:
            raise OutOfRange("data length does not match sector count")
        self.ops += 1
        cost = self.cost_model.cost(count)
        self.ticks_charged += cost
        off = lba * SECTOR_SIZE
        self.data[off : off + len(data)] = data
        return cost

    def save(self, path=None):
        path = path or self.path
        if path is None:
            return
        try:
            with open(path, "wb") as f:
                f.write(self.data)
        except OSError as e:
            raise IoError(str(e)) from e


class FbHw:
    """Shadow/visible framebuffer pair.

    Writes land in the shadow buffer; only fb_flush copies them to the
    visible buffer, modeling the cache flush a real board needs before
    pixels reach the display.
    """

    def __init__(self, width=FB_WIDTH, height=FB_HEIGHT):
        self.width = width
        self.height = height
        self.shadow = np.zeros((height, width, FB_BPP), dtype=np.uint8)
        self.visible = np.zeros((height, width, FB_BPP), dtype=np.uint8)
        self.flush_count = 0

    @property
    def stride(self):
        return self.width * FB_BPP

    @property
    def size_bytes(self):
        return self.height * self.stride

    def write_bytes(self, off, data):
        if off < 0 or off + len(data) > self.size_bytes:
            raise OutOfRange(f"fb write off={off} len={len(data)}")
        flat = self.shadow.reshape(-1)
        flat[off : off + len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)

    def read_bytes(self, off, n):
        if off < 0 or off + n > self.size_bytes:
            raise OutOfRange(f"fb read off={off} len={n}")
        return self.shadow.reshape(-1)[off : off + n].tobytes()

    def flush(self):
        np.copyto(self.visible, self.shadow)
        self.flush_count += 1

    def dump_ppm(self, path):
        """Write the visible buffer as binary PPM (P6); alpha dropped."""
        header = f"P6\n{self.width} {self.height}\n255\n".encode()
        try:
            with open(path, "wb") as f:
                f.write(header)
                f.write(self.visible[:, :, :3].tobytes())
        except OSError as e:
            raise IoError(str(e)) from e

    def ppm_bytes(self):
        header = f"P6\n{self.width} {self.height}\n255\n".encode()
        return header + self.visible[:, :, :3].tobytes()


@dataclass(frozen=True)
class RawKeyEvent:
    scancode: int
    action: str          # "press" | "release"
    mods: frozenset
    tick: int


class KeySource:
    """Host-injected keyboard events, delivered by the next advance()."""

    def __init__(self):
        self.pending = []
        self.injected = 0

    def inject(self, scancode, action, mods, tick):
        if len(self.pending) >= KEY_INJECT_CAP:
            raise QueueFull("keyboard inject queue full")
        self.pending.append(RawKeyEvent(scancode, action, frozenset(mods), tick))
        self.injected += 1

    def drain(self):
        evs, self.pending = self.pending, []
        return evs


class AudioHw:
    """Fixed-rate sample sink with a small hardware fifo.

    The engine starts when the first samples are pushed and consumes
    floor(rate * elapsed) samples (fractional remainders carry between
    advances). A drain attempt against an empty fifo counts one underrun.
    """

    def __init__(self, rate=AUDIO_RATE, fifo_cap=AUDIO_FIFO_CAP):
        self.rate = rate
        self.fifo_cap = fifo_cap
        self.fifo = []
        self.started = False
        self.underruns = 0
        self.consumed = 0
        self.pushed = 0
        self._acc = 0  # rate*ticks not yet converted into whole samples

    def space(self):
        return self.fifo_cap - len(self.fifo)

    def push(self, samples):
        """Feed samples into the fifo; returns how many were accepted."""
        n = min(len(samples), self.space())
        if n:
            self.fifo.extend(samples[:n])
            self.pushed += n
            self.started = True
        return n

    def stop(self):
        self.started = False
        self._acc = 0

    def drain(self, dt):
        """Consume for dt ticks. Returns (dma_irq_due, underrun_happened)."""
        if not self.started:
            return False, False
        self._acc += dt * self.rate
        want = self._acc // TICKS_PER_SEC
        self._acc %= TICKS_PER_SEC
        if want == 0:
            return False, False
        pre = len(self.fifo)
        take = min(want, pre)
        if take:
            del self.fifo[:take]
            self.consumed += take
        post = len(self.fifo)
        underrun = want > take
        if underrun:
            self.underruns += 1
        half = self.fifo_cap // 2
        crossed = pre >= half > post
        emptied = pre > 0 and post == 0
        return crossed or emptied or underrun, underrun

    def ticks_until_samples(self, n):
        """Ticks until n more whole samples would drain (given current carry)."""
        need = n * TICKS_PER_SEC - self._acc
        return max(1, -(-need // self.rate))

    def next_threshold_ticks(self):
        """Ticks until the fifo next crosses half-full or runs empty; None if idle."""
        if not self.started or not self.fifo:
            return None
        half = self.fifo_cap // 2
        level = len(self.fifo)
        target = level - half + 1 if level >= half else level
        return self.ticks_until_samples(max(1, target))


class Hardware:
    """Container for all simulated devices plus the advance() event pump."""

    def __init__(self, seed=0, ncores=1, fb_size=(FB_WIDTH, FB_HEIGHT),
                 total_pages=262144):
        self.seed = seed
        self.ncores = ncores
        self.clock = SimClock()
        self.ram = Ram(total_pages, seed)
        self.fb = FbHw(*fb_size)
        self.keyboard = KeySource()
        self.audio = AudioHw()
        self.blockdevs = {}
        self.fiq_presses = 0
        self.uart_log = bytearray()

    # -- device registration ------------------------------------------------

    def add_blockdev(self, name, dev: BlockDev):
        self.blockdevs[name] = dev
        return dev

    def uart_write(self, data: bytes):
        # Output-only, synchronous: there is nothing to wait for.
        self.uart_log.extend(data)

    # -- interrupt generation -----------------------------------------------

    def arm_timer(self, deadline, tag=None, period=0, core=0):
        return self.clock.arm(deadline, tag=(core, tag), period=period)

    def cancel_timer(self, timer_id):
        self.clock.cancel(timer_id)

    def inject_key(self, scancode, action, mods=()):
        self.keyboard.inject(scancode, action, mods, self.clock.now)

    def press_panic_button(self):
        """FIQ: always deliverable; the n-th press is handled by core n % ncores."""
        core = self.fiq_presses % self.ncores
        self.fiq_presses += 1
        return IrqEvent(IrqKind.FIQ_PANIC, core, self.clock.now)

    def next_deadline(self):
        """Earliest tick at which advance() would raise an IRQ, or None."""
        candidates = []
        d = self.clock.next_deadline()
        if d is not None:
            candidates.append(d)
        if self.keyboard.pending:
            candidates.append(self.clock.now + 1)
        t = self.audio.next_threshold_ticks()
        if t is not None:
            candidates.append(self.clock.now + t)
        return min(candidates) if candidates else None

    def advance(self, dt):
        """Move time forward by dt ticks and return raised IRQs in order.

        Expired timers, due key events and audio thresholds are converted
        into IrqEvents ordered by (tick, line id, sub id). Timer IRQs for
        core c target core c; block/keyboard/audio lines target core 0.
        """
        if dt <= 0:
            raise ValueError("advance requires dt > 0")
        end = self.clock.now + dt
        events = []
        for deadline, tid, (core, tag) in self.clock.pop_due(end):
            events.append(IrqEvent(IrqKind.TIMER, core, deadline, tag=tag, sub=tid))
        if self.keyboard.pending:
            events.append(IrqEvent(IrqKind.KEYBOARD, 0, min(end, self.clock.now + 1)))
        dma, _ = self.audio.drain(dt)
        if dma:
            events.append(IrqEvent(IrqKind.AUDIO_DMA, 0, end))
        self.clock.now = end
        events.sort(key=IrqEvent.sort_key)
        return events
