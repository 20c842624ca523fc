"""Device files: framebuffer with flush semantics, keyboard event queues,
the DMA-style audio pipeline, the surface device feeding the window
manager, and the text console.

Event records are fixed 8-byte units on the wire:

    scancode u16, action u8 (1=press 0=release), mods u8 (ctrl|shift<<1|alt<<2),
    tick u32 (little-endian)

Surface messages (one or more whole messages per write):

    CONFIG: magic 0xC0F1 u16, w u16, h u16, flags u16 (1=FLOAT, 2=ALPHA)
    RECT:   magic 0x7EC7 u16, x u16, y u16, w u16, h u16, then w*h*4 RGBA bytes
"""

import struct

import numpy as np

from . import font
from .errors import (Err, OutOfRange, ProtocolError, SimError, WouldBlock)
from .sched import Channel, TaskState

EVENT_QUEUE_CAP = 256
EVENT_RECORD = struct.Struct("<HBBI")
EVENT_SIZE = 8

AUDIO_RING_CAP = 8192  # samples

MOD_CTRL = 1
MOD_SHIFT = 2
MOD_ALT = 4

ACT_RELEASE = 0
ACT_PRESS = 1

CONFIG_MAGIC = 0xC0F1
RECT_MAGIC = 0x7EC7
SURF_FLOAT = 1
SURF_ALPHA = 2

FB_FLUSH = 1
FB_GET_GEOMETRY = 2

# HID-style usage ids for the simulated keyboard
KEY_ENTER = 40
KEY_BACKSPACE = 42
KEY_TAB = 43
KEY_SPACE = 44
KEY_RIGHT = 79
KEY_LEFT = 80
KEY_DOWN = 81
KEY_UP = 82

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_DIGITS = "1234567890"
_DIGIT_SHIFT = "!@#$%^&*()"
_PUNCT = {
    45: ("-", "_"), 46: ("=", "+"), 47: ("[", "{"), 48: ("]", "}"),
    49: ("\\", "|"), 51: (";", ":"), 52: ("'", '"'), 53: ("`", "~"),
    54: (",", "<"), 55: (".", ">"), 56: ("/", "?"),
}


class BadLength(SimError):
    code = Err.INVALID


def scancode_for_char(ch):
    """Inverse keymap used by script drivers: char -> (scancode, needs_shift)."""
    if ch in _LETTERS:
        return 4 + _LETTERS.index(ch), False
    if ch.lower() in _LETTERS and ch.isalpha():
        return 4 + _LETTERS.index(ch.lower()), True
    if ch in _DIGITS:
        return 30 + _DIGITS.index(ch), False
    if ch in _DIGIT_SHIFT:
        return 30 + _DIGIT_SHIFT.index(ch), True
    if ch == "\n":
        return KEY_ENTER, False
    if ch == " ":
        return KEY_SPACE, False
    for code, (plain, shifted) in _PUNCT.items():
        if ch == plain:
            return code, False
        if ch == shifted:
            return code, True
    raise KeyError(f"no scancode for {ch!r}")


def cook_char(scancode, mods):
    """Scancode+mods -> character, or None for unmapped keys."""
    shift = bool(mods & MOD_SHIFT)
    if 4 <= scancode < 30:
        ch = _LETTERS[scancode - 4]
        return ch.upper() if shift else ch
    if 30 <= scancode < 40:
        return _DIGIT_SHIFT[scancode - 30] if shift else _DIGITS[scancode - 30]
    if scancode == KEY_ENTER:
        return "\n"
    if scancode == KEY_SPACE:
        return " "
    if scancode == KEY_BACKSPACE:
        return "\b"
    if scancode in _PUNCT:
        plain, shifted = _PUNCT[scancode]
        return shifted if shift else plain
    return None


class KeyEvent:
    __slots__ = ("scancode", "action", "mods", "tick")

    def __init__(self, scancode, action, mods, tick):
        self.scancode = scancode
        self.action = action
        self.mods = mods
        self.tick = tick

    def pack(self):
        return EVENT_RECORD.pack(self.scancode, self.action, self.mods,
                                 self.tick & 0xFFFFFFFF)

    @classmethod
    def from_raw(cls, raw):
        mods = 0
        if "ctrl" in raw.mods:
            mods |= MOD_CTRL
        if "shift" in raw.mods:
            mods |= MOD_SHIFT
        if "alt" in raw.mods:
            mods |= MOD_ALT
        action = ACT_PRESS if raw.action == "press" else ACT_RELEASE
        return cls(raw.scancode, action, mods, raw.tick)


class EventQueue:
    """FIFO of key events; overflow drops the newest and counts the drop."""

    def __init__(self, name):
        self.items = []
        self.overflow_count = 0
        self.delivered = 0
        self.accepted = 0
        self.channel = Channel(("events", name))

    def push(self, ev):
        if len(self.items) >= EVENT_QUEUE_CAP:
            self.overflow_count += 1
            return False
        self.items.append(ev)
        self.accepted += 1
        return True

    def pop_records(self, max_records):
        n = min(max_records, len(self.items))
        taken, self.items = self.items[:n], self.items[n:]
        self.delivered += n
        return b"".join(ev.pack() for ev in taken)

    def __len__(self):
        return len(self.items)


class AudioRing:
    """Driver-side sample ring between sb_write() and the hardware fifo."""

    def __init__(self):
        self.buf = []
        self.produced = 0
        self.writer_ch = Channel(("audio", "ring"))
        self.open_writers = 0

    def space(self):
        return AUDIO_RING_CAP - len(self.buf)

    def push(self, samples):
        n = min(len(samples), self.space())
        self.buf.extend(samples[:n])
        self.produced += n
        return n

    def pull(self, n):
        take, self.buf = self.buf[:n], self.buf[n:]
        return take


# -- rendering ---------------------------------------------------------------


_GLYPH_CACHE = {}


def glyph_mask(ch):
    mask = _GLYPH_CACHE.get(ch)
    if mask is None:
        rows = font.glyph_rows(ch)
        mask = np.zeros((font.CELL_H, font.CELL_W), dtype=bool)
        for y, byte in enumerate(rows):
            for x in range(font.CELL_W):
                if byte & (1 << (7 - x)):
                    mask[y, x] = True
        _GLYPH_CACHE[ch] = mask
    return mask


class TextConsole:
    """Scrolling character grid rendered through a pixel sink.

    The sink exposes blit(x, y, pixels) plus present(); the p4 sink paints
    the framebuffer directly, the p5 sink paints the console's surface.
    """

    FG = (230, 230, 230, 255)
    BG = (0, 0, 40, 255)

    def __init__(self, sink, width, height):
        self.sink = sink
        self.cols = width // font.CELL_W
        self.rows = height // font.CELL_H
        self.grid = [[" "] * self.cols for _ in range(self.rows)]
        self.cx = 0
        self.cy = 0

    def _cell_pixels(self, ch):
        cell = np.empty((font.CELL_H, font.CELL_W, 4), dtype=np.uint8)
        cell[:, :] = self.BG
        cell[glyph_mask(ch)] = self.FG
        return cell

    def _draw_cell(self, col, row, ch):
        self.sink.blit(col * font.CELL_W, row * font.CELL_H, self._cell_pixels(ch))

    def put_text(self, text):
        for ch in text:
            self.putc(ch)
        self.sink.present()

    def putc(self, ch):
        if ch == "\n":
            self.cx = 0
            self.cy += 1
        elif ch == "\b":
            if self.cx > 0:
                self.cx -= 1
                self.grid[self.cy][self.cx] = " "
                self._draw_cell(self.cx, self.cy, " ")
        elif ch == "\r":
            self.cx = 0
        else:
            if self.cx >= self.cols:
                self.cx = 0
                self.cy += 1
            if self.cy >= self.rows:
                self._scroll()
            self.grid[self.cy][self.cx] = ch
            self._draw_cell(self.cx, self.cy, ch)
            self.cx += 1
        if self.cy >= self.rows:
            self._scroll()

    def _scroll(self):
        self.grid.pop(0)
        self.grid.append([" "] * self.cols)
        self.cy = self.rows - 1
        for row in range(self.rows):
            for col in range(self.cols):
                self._draw_cell(col, row, self.grid[row][col])


class FbSink:
    """Console sink writing straight to the framebuffer (pre-WM profiles)."""

    def __init__(self, fb):
        self.fb = fb

    def blit(self, x, y, pixels):
        h, w, _ = pixels.shape
        self.fb.shadow[y : y + h, x : x + w] = pixels

    def present(self):
        self.fb.flush()


class SurfaceSink:
    """Console sink drawing into a WM surface and marking it dirty."""

    def __init__(self, wm, surface):
        self.wm = wm
        self.surface = surface

    def blit(self, x, y, pixels):
        h, w, _ = pixels.shape
        self.surface.pixels[y : y + h, x : x + w] = pixels
        self.surface.mark_dirty(x, y, w, h)

    def present(self):
        pass  # the WM composites on its own clock


# -- devices -------------------------------------------------------------------


class FbDevice:
    """/dev/fb: positioned byte writes into the shadow buffer."""

    name = "fb"

    def __init__(self, hw):
        self.hw = hw

    @property
    def size_bytes(self):
        return self.hw.fb.size_bytes

    def read(self, kernel, task, of, n):
        n = min(n, self.size_bytes - of.offset)
        data = self.hw.fb.read_bytes(of.offset, n)
        of.offset += n
        return data

    def write(self, kernel, task, of, data):
        if of.offset + len(data) > self.size_bytes:
            raise OutOfRange("write beyond framebuffer")
        self.hw.fb.write_bytes(of.offset, data)
        of.offset += len(data)
        return len(data)

    def ctl(self, kernel, op):
        if op == FB_FLUSH:
            self.hw.fb.flush()
            return b""
        if op == FB_GET_GEOMETRY:
            fb = self.hw.fb
            return struct.pack("<IIII", fb.width, fb.height, fb.stride, 1)
        raise OutOfRange(f"fbctl op {op}")


class EventsDevice:
    """/dev/events: the raw keyboard queue (pre-WM input path)."""

    name = "events"

    def __init__(self, devio, queue):
        self.devio = devio
        self.queue = queue

    def read(self, kernel, task, of, n):
        if n % EVENT_SIZE:
            raise BadLength(f"event reads are {EVENT_SIZE}-byte records")
        while True:
            if len(self.queue):
                return self.queue.pop_records(n // EVENT_SIZE)
            if of.nonblock:
                raise WouldBlock("no events")
            yield from kernel.sched.sleep_on(task, self.queue.channel,
                                             state=TaskState.BLOCKED)

    def write(self, kernel, task, of, data):
        raise OutOfRange("events device is read-only")


class Event1Device:
    """/dev/event1: WM-routed events for the caller's focused window."""

    name = "event1"

    def __init__(self, devio):
        self.devio = devio

    def _queue_for(self, kernel, task):
        wm = kernel.wm
        if wm is None:
            raise WouldBlock("no window manager")
        surf = wm.surface_for_task(task)
        if surf is None:
            raise WouldBlock("task has no surface")
        return surf.event_queue

    def read(self, kernel, task, of, n):
        if n % EVENT_SIZE:
            raise BadLength(f"event reads are {EVENT_SIZE}-byte records")
        while True:
            q = self._queue_for(kernel, task)
            if len(q):
                return q.pop_records(n // EVENT_SIZE)
            if of.nonblock:
                raise WouldBlock("no events")
            yield from kernel.sched.sleep_on(task, q.channel,
                                             state=TaskState.BLOCKED)

    def write(self, kernel, task, of, data):
        raise OutOfRange("event1 device is read-only")


class SbDevice:
    """/dev/sb: blocking PCM sink into the audio ring.

    Reads return an 8-byte status record (underruns u32, buffered u32) so
    players can check pipeline health.
    """

    name = "sb"
    O_WR = 2  # mirror of the vfs write flag, to avoid an import cycle

    def __init__(self, devio):
        self.devio = devio

    def on_open(self, of):
        if of.flags & self.O_WR:
            self.devio.audio_ring.open_writers += 1

    def on_close(self, of):
        if of.flags & self.O_WR:
            self.devio.audio_ring.open_writers -= 1

    def read(self, kernel, task, of, n):
        hw = kernel.hw.audio
        buffered = len(hw.fifo) + len(self.devio.audio_ring.buf)
        return struct.pack("<II", hw.underruns, buffered)[:n]

    def write(self, kernel, task, of, data):
        if len(data) % 2:
            raise BadLength("samples are 16-bit")
        samples = list(struct.unpack(f"<{len(data) // 2}h", data))
        ring = self.devio.audio_ring
        idx = 0
        while idx < len(samples):
            pushed = ring.push(samples[idx:])
            idx += pushed
            self.devio.refill_audio()
            if pushed or ring.space():
                continue
            if of.nonblock:
                if idx:
                    return idx * 2
                raise WouldBlock("audio ring full")
            yield from kernel.sched.sleep_on(task, ring.writer_ch,
                                             state=TaskState.BLOCKED)
        return len(data)


class SurfaceDevice:
    """/dev/surface: CONFIG then RECT messages, rendered via the WM."""

    name = "surface"

    def __init__(self, devio):
        self.devio = devio

    def read(self, kernel, task, of, n):
        raise OutOfRange("surface device is write-only")

    def write(self, kernel, task, of, data):
        wm = kernel.wm
        if wm is None:
            raise ProtocolError("no window manager in this profile")
        view = memoryview(bytes(data))
        while view:
            if len(view) < 2:
                raise ProtocolError("short message")
            (magic,) = struct.unpack_from("<H", view, 0)
            if magic == CONFIG_MAGIC:
                if len(view) < 8:
                    raise ProtocolError("short CONFIG")
                _, w, h, flags = struct.unpack_from("<HHHH", view, 0)
                wm.create_surface(task, w, h, flags)
                view = view[8:]
            elif magic == RECT_MAGIC:
                if len(view) < 10:
                    raise ProtocolError("short RECT")
                _, x, y, w, h = struct.unpack_from("<HHHHH", view, 0)
                need = 10 + w * h * 4
                if len(view) < need:
                    raise ProtocolError("RECT payload truncated")
                surf = wm.surface_for_task(task, strict=True)
                if surf is None:
                    raise ProtocolError("RECT before CONFIG")
                wm.update_rect(surf, x, y, w, h, bytes(view[10:need]))
                view = view[need:]
            else:
                raise ProtocolError(f"bad magic 0x{magic:04x}")
        return len(data)


class ConsoleDevice:
    """/dev/console: synchronous text out, line-disciplined keyboard in."""

    name = "console"

    def __init__(self, devio):
        self.devio = devio
        self.linebuf = bytearray()
        self.pending = bytearray()

    def write(self, kernel, task, of, data):
        self.devio.console_out(bytes(data))
        return len(data)

    def read(self, kernel, task, of, n):
        while not self.pending:
            q = self.devio.console_input_queue(task)
            while len(q) and not self.pending:
                raw = q.pop_records(1)
                sc, action, mods, _tick = EVENT_RECORD.unpack(raw)
                if action != ACT_PRESS:
                    continue
                ch = cook_char(sc, mods)
                if ch is None or (mods & MOD_CTRL):
                    continue
                if ch == "\b":
                    if self.linebuf:
                        self.linebuf.pop()
                        self.devio.console_out(b"\b")
                    continue
                self.linebuf += ch.encode()
                self.devio.console_out(ch.encode())
                if ch == "\n":
                    self.pending += self.linebuf
                    self.linebuf.clear()
            if self.pending:
                break
            if of.nonblock:
                raise WouldBlock("no console input")
            yield from kernel.sched.sleep_on(task, q.channel,
                                             state=TaskState.BLOCKED)
        take = min(n, len(self.pending))
        out = bytes(self.pending[:take])
        del self.pending[:take]
        return out


class DevIo:
    """Wires the device files to the hardware and the kernel IRQ paths."""

    def __init__(self, kernel):
        self.kernel = kernel
        self.events_queue = EventQueue("global")
        self.audio_ring = AudioRing()
        self.console = ConsoleDevice(self)
        self.text_console = None
        self.fbdev = FbDevice(kernel.hw)

    def register_devices(self, vfs):
        vfs.register_device("console", self.console)
        vfs.register_device("fb", self.fbdev)
        vfs.register_device("events", EventsDevice(self, self.events_queue))
        vfs.register_device("sb", SbDevice(self))
        if self.kernel.profile.has_wm:
            vfs.register_device("event1", Event1Device(self))
            vfs.register_device("surface", SurfaceDevice(self))

    def attach_console_renderer(self):
        hw = self.kernel.hw
        if self.kernel.wm is not None:
            surf = self.kernel.wm.create_console_surface(hw.fb.width, hw.fb.height)
            sink = SurfaceSink(self.kernel.wm, surf)
        else:
            sink = FbSink(hw.fb)
        self.text_console = TextConsole(sink, hw.fb.width, hw.fb.height)

    # -- console plumbing ------------------------------------------------------

    def console_out(self, data: bytes):
        self.kernel.hw.uart_write(data)
        if self.text_console is not None:
            self.text_console.put_text(data.decode("utf-8", "replace"))

    def console_input_queue(self, task):
        wm = self.kernel.wm
        if wm is not None and wm.console_surface is not None:
            return wm.console_surface.event_queue
        return self.events_queue

    # -- IRQ handlers ---------------------------------------------------------------

    def on_keyboard_irq(self):
        raws = self.kernel.hw.keyboard.drain()
        wm = self.kernel.wm
        for raw in raws:
            ev = KeyEvent.from_raw(raw)
            if wm is not None:
                wm.enqueue_input(ev)
            else:
                self.events_queue.push(ev)
        if raws:
            if wm is not None:
                self.kernel.sched.wakeup(wm.input_channel)
            else:
                self.kernel.sched.wakeup(self.events_queue.channel)

    def on_audio_dma(self):
        self.refill_audio()
        hw = self.kernel.hw.audio
        if (self.audio_ring.open_writers == 0 and not self.audio_ring.buf
                and not hw.fifo):
            hw.stop()

    def refill_audio(self):
        hw = self.kernel.hw.audio
        space = hw.space()
        if space and self.audio_ring.buf:
            hw.push(self.audio_ring.pull(space))
        if self.audio_ring.space():
            self.kernel.sched.wakeup(self.audio_ring.writer_ch)
