"""Window manager: a kernel thread owning the surface list, z-order,
dirty-region compositing, focus and hotkeys.

Surfaces are painted back-to-front; floating surfaces stack above all
regular ones (insertion order within each class). Semi-transparent
surfaces blend (src + dst) // 2 per channel. Only damaged screen
rectangles are repainted, and each composite ends in exactly one
framebuffer flush.

Hotkeys consumed by the WM: ctrl+tab cycles focus, ctrl+arrows move the
focused window 10 px.
"""

import numpy as np

from .abi import Cpu, KWait
from .devio import (ACT_PRESS, EventQueue, KEY_DOWN, KEY_LEFT,
                    KEY_RIGHT, KEY_TAB, KEY_UP, MOD_CTRL, SURF_ALPHA,
                    SURF_FLOAT)
from .errors import ProtocolError
from .sched import Channel
from .trace import TraceKind

COMPOSITE_PERIOD = 16_000   # ~60 Hz simulated
MOVE_STEP = 10
INPUT_DISPATCH_COST = 15    # ticks per routed event: the indirection cost
BG_COLOR = (24, 24, 56, 255)


class Surface:
    def __init__(self, sid, owner_tid, x, y, w, h, flags):
        self.id = sid
        self.owner = owner_tid
        self.x = x
        self.y = y
        self.w = w
        self.h = h
        self.flags = flags
        self.z = sid          # creation order; unique
        self.pixels = np.zeros((h, w, 4), dtype=np.uint8)
        self.dirty = []       # surface-local (x, y, w, h)
        self.event_queue = EventQueue(f"surface{sid}")

    @property
    def floating(self):
        return bool(self.flags & SURF_FLOAT)

    @property
    def translucent(self):
        return bool(self.flags & SURF_ALPHA)

    def mark_dirty(self, x, y, w, h):
        self.dirty.append((x, y, w, h))

    def screen_rect(self):
        return (self.x, self.y, self.w, self.h)


def _clip(rect, w, h):
    x, y, rw, rh = rect
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(w, x + rw), min(h, y + rh)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _intersect(a, b):
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[0] + a[2], b[0] + b[2])
    y1 = min(a[1] + a[3], b[1] + b[3])
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


class WindowManager:
    def __init__(self, kernel):
        self.kernel = kernel
        self.fb = kernel.hw.fb
        self.surfaces = {}
        self._next_sid = 1
        self.focused = None
        self.console_surface = None
        self.input_channel = Channel(("wm", "input"))
        self.pending_input = []
        self.dropped_inputs = 0
        # first composite paints the whole background
        self.damage = [(0, 0, self.fb.width, self.fb.height)]
        self.composites = 0

    # -- surface registry -------------------------------------------------------

    def _place(self, w, h):
        k = len(self.surfaces)
        x = (32 * k) % max(1, self.fb.width - w + 1)
        y = (24 * k) % max(1, self.fb.height - h + 1)
        return x, y

    def create_surface(self, task, w, h, flags):
        if w < 1 or h < 1 or w > self.fb.width or h > self.fb.height:
            raise ProtocolError(f"surface {w}x{h} does not fit the screen")
        x, y = self._place(w, h)
        surf = Surface(self._next_sid, task.tid if task else 0, x, y, w, h, flags)
        self._next_sid += 1
        self.surfaces[surf.id] = surf
        surf.mark_dirty(0, 0, w, h)
        self.focused = surf.id
        return surf

    def create_console_surface(self, w, h):
        surf = Surface(self._next_sid, 0, 0, 0, w, h, 0)
        self._next_sid += 1
        self.surfaces[surf.id] = surf
        surf.mark_dirty(0, 0, w, h)
        self.console_surface = surf
        self.focused = surf.id
        return surf

    def surface_for_task(self, task, strict=False):
        """The nearest surface up the task's parent chain (its window)."""
        walk = task
        while walk is not None:
            owned = [s for s in self.surfaces.values() if s.owner == walk.tid]
            if owned:
                return owned[-1]
            if strict and walk is not task:
                break
            walk = self.kernel.sched.tasks.get(walk.parent)
        return None

    def destroy_surfaces_of(self, tid):
        for sid in [s for s, surf in self.surfaces.items() if surf.owner == tid]:
            surf = self.surfaces.pop(sid)
            self.damage.append(surf.screen_rect())
            if self.focused == sid:
                order = self.paint_order()
                self.focused = order[-1].id if order else None

    def update_rect(self, surf, x, y, w, h, pixel_bytes):
        if x + w > surf.w or y + h > surf.h or w < 1 or h < 1:
            raise ProtocolError("RECT outside surface bounds")
        arr = np.frombuffer(pixel_bytes, dtype=np.uint8).reshape(h, w, 4)
        surf.pixels[y : y + h, x : x + w] = arr
        surf.mark_dirty(x, y, w, h)

    def paint_order(self):
        return sorted(self.surfaces.values(), key=lambda s: (s.floating, s.z))

    # -- input ----------------------------------------------------------------------

    def enqueue_input(self, ev):
        self.pending_input.append(ev)

    def dispatch_input(self, ev):
        """Hotkeys are consumed here; everything else goes to the focus."""
        if ev.mods & MOD_CTRL and ev.action == ACT_PRESS:
            if ev.scancode == KEY_TAB:
                self.cycle_focus()
                return "consumed"
            moves = {KEY_RIGHT: (MOVE_STEP, 0), KEY_LEFT: (-MOVE_STEP, 0),
                     KEY_DOWN: (0, MOVE_STEP), KEY_UP: (0, -MOVE_STEP)}
            if ev.scancode in moves:
                self.move_focused(*moves[ev.scancode])
                return "consumed"
        surf = self.surfaces.get(self.focused)
        if surf is None:
            self.dropped_inputs += 1
            return "dropped"
        surf.event_queue.push(ev)
        self.kernel.sched.wakeup(surf.event_queue.channel)
        return "routed"

    def cycle_focus(self):
        order = self.paint_order()
        if not order:
            return
        ids = [s.id for s in order]
        if self.focused not in ids:
            self.focused = ids[-1]
            return
        self.focused = ids[(ids.index(self.focused) + 1) % len(ids)]

    def move_focused(self, dx, dy):
        surf = self.surfaces.get(self.focused)
        if surf is None:
            return
        old = surf.screen_rect()
        surf.x = max(0, min(self.fb.width - surf.w, surf.x + dx))
        surf.y = max(0, min(self.fb.height - surf.h, surf.y + dy))
        if (surf.x, surf.y) != old[:2]:
            self.damage.append(old)
            self.damage.append(surf.screen_rect())

    # -- compositing -------------------------------------------------------------------

    def composite(self):
        """Repaint damaged screen regions back-to-front; one flush at the end.

        Returns the list of screen rects that were repainted.
        """
        rects = []
        for surf in self.surfaces.values():
            for d in surf.dirty:
                r = _clip((surf.x + d[0], surf.y + d[1], d[2], d[3]),
                          self.fb.width, self.fb.height)
                if r:
                    rects.append(r)
            surf.dirty.clear()
        for d in self.damage:
            r = _clip(d, self.fb.width, self.fb.height)
            if r:
                rects.append(r)
        self.damage.clear()
        if not rects:
            return []
        order = self.paint_order()
        shadow = self.fb.shadow
        pixels = 0
        for (x, y, w, h) in rects:
            pixels += w * h
            shadow[y : y + h, x : x + w] = BG_COLOR
            for surf in order:
                sub = _intersect((x, y, w, h), surf.screen_rect())
                if sub is None:
                    continue
                sx, sy, sw, sh = sub
                src = surf.pixels[sy - surf.y : sy - surf.y + sh,
                                  sx - surf.x : sx - surf.x + sw]
                dst = shadow[sy : sy + sh, sx : sx + sw]
                if surf.translucent:
                    dst[:] = ((src.astype(np.uint16) + dst.astype(np.uint16)) // 2
                              ).astype(np.uint8)
                else:
                    dst[:] = src
        self.fb.flush()
        self.composites += 1
        self.kernel.trace.emit(self.kernel.hw.clock.now, 0,
                               TraceKind.WM_COMPOSITE, len(rects), pixels)
        return rects


def wm_thread(kernel):
    """The compositor loop: wake on input or at the composite period."""
    wm = kernel.wm
    next_composite = kernel.hw.clock.now + COMPOSITE_PERIOD
    while True:
        yield KWait(wm.input_channel, next_composite)
        pending, wm.pending_input = wm.pending_input, []
        if pending:
            # routing is work: the event indirection costs simulated time
            yield Cpu(INPUT_DISPATCH_COST * len(pending))
        for ev in pending:
            wm.dispatch_input(ev)
        now = kernel.hw.clock.now
        if now + 1000 >= next_composite:
            rects = wm.composite()
            repainted = sum(w * h for (_, _, w, h) in rects)
            yield Cpu(100 + repainted // 256)
            next_composite += COMPOSITE_PERIOD
            if next_composite <= kernel.hw.clock.now:
                next_composite = kernel.hw.clock.now + COMPOSITE_PERIOD
