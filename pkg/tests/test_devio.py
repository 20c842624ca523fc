import struct

from protosim.abi import sc
from protosim.devio import (ACT_PRESS, EVENT_QUEUE_CAP, EVENT_RECORD,
                            EventQueue, KeyEvent, cook_char, scancode_for_char)
from protosim.errors import Err
from protosim.mem import PAGE_SIZE
from protosim.vfs import O_NONBLOCK, O_RD, O_WR, SEEK_SET

from tests.conftest import type_text, uart_text
from tests.test_proc import start_guest, finish


class TestFbDevice:
    def test_write_without_flush_stays_invisible(self, boot_p4, tmp_path):
        k = boot_p4(init_demo=False)
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/fb", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"\xff\x00\x00\xff" * 640)
            yield sc("write", fd, buf, 640 * 4)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        p = tmp_path / "noflush.ppm"
        k.screenshot(p)
        body = p.read_bytes().split(b"\n255\n", 1)[1]
        assert body == b"\0" * len(body)

    def test_flush_makes_row_visible(self, boot_p4, tmp_path):
        k = boot_p4(init_demo=False)

        def prog(ctx):
            fd = yield sc("open", "/dev/fb", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"\xff\x00\x00\xff" * 640)
            yield sc("write", fd, buf, 640 * 4)
            yield sc("fbctl", 1, 0)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert (k.hw.fb.visible[0, :, 0] == 255).all()
        assert (k.hw.fb.visible[1:].sum()) == 0

    def test_overlapping_writes_last_wins(self, boot_p4):
        k = boot_p4(init_demo=False)

        def prog(ctx):
            fd = yield sc("open", "/dev/fb", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"\x11" * 64)
            yield sc("write", fd, buf, 64)
            yield sc("lseek", fd, 32, SEEK_SET)
            ctx.mem.write(buf, b"\x22" * 16)
            yield sc("write", fd, buf, 16)
            yield sc("fbctl", 1, 0)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        flat = k.hw.fb.visible.reshape(-1)
        assert (flat[:32] == 0x11).all()
        assert (flat[32:48] == 0x22).all()
        assert (flat[48:64] == 0x11).all()

    def test_out_of_range_write(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/fb", O_WR)
            size = 640 * 480 * 4
            yield sc("lseek", fd, size - 2, SEEK_SET)
            buf = yield sc("sbrk", PAGE_SIZE)
            res["rv"] = yield sc("write", fd, buf, 8)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.OUT_OF_RANGE)


class TestEventsDevice:
    def test_record_framing_and_order(self, boot_p4):
        k = boot_p4(init_demo=False)
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/events", O_RD)
            buf = yield sc("sbrk", PAGE_SIZE)
            n = yield sc("read", fd, buf, 16)
            res["n"] = n
            res["recs"] = [EVENT_RECORD.unpack(ctx.mem.read(buf + i, 8))
                           for i in range(0, n, 8)]
            return 0

        t = start_guest(k, prog)
        k.step(50_000)
        k.inject_key(4, "press", [])
        k.inject_key(4, "release", [])
        finish(k, t)
        recs = res["recs"]
        assert [(r[0], r[1]) for r in recs] == [(4, 1), (4, 0)]

    def test_sub_record_read_rejected(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/events", O_RD)
            buf = yield sc("sbrk", PAGE_SIZE)
            res["rv"] = yield sc("read", fd, buf, 4)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.INVALID)

    def test_ctrl_tab_mods_carried(self, boot_p5):
        k = boot_p5()
        k.inject_key(224, "press", [])
        k.inject_key(43, "press", ["ctrl"])
        k.step(10_000)
        # the WM consumed ctrl+tab as a hotkey; nothing reached a surface
        assert k.wm.surfaces[k.wm.console_surface.id].event_queue.items == []

    def test_queue_overflow_drops_newest_and_counts(self):
        q = EventQueue("t")
        for i in range(EVENT_QUEUE_CAP + 5):
            q.push(KeyEvent(i, ACT_PRESS, 0, 0))
        assert len(q) == EVENT_QUEUE_CAP
        assert q.overflow_count == 5
        assert q.items[0].scancode == 0  # oldest kept

    def test_conservation(self, boot_p4):
        k = boot_p4()
        q = k.devio.events_queue
        for i in range(40):
            k.inject_key(4 + (i % 20), "press", [])
        k.step(5_000)
        injected = k.hw.keyboard.injected
        assert injected == q.accepted + q.overflow_count
        assert q.accepted == q.delivered + len(q)


class TestAudioDevice:
    def test_full_ring_write_returns_without_blocking(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/sb", O_WR)
            buf = yield sc("sbrk", 8192 * 2)
            res["rv"] = yield sc("write", fd, buf, 8192 * 2)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == 8192 * 2

    def test_producer_conservation(self, boot_p5):
        k = boot_p5()

        def prog(ctx):
            fd = yield sc("open", "/dev/sb", O_WR)
            buf = yield sc("sbrk", 4096)
            for _ in range(20):
                yield sc("write", fd, buf, 2048)
                yield sc("sleep", 20)
            return 0

        t = start_guest(k, prog)
        finish(k, t, ticks=3_000_000)
        hw = k.hw.audio
        ring = k.devio.audio_ring
        assert ring.produced == hw.consumed + len(hw.fifo) + len(ring.buf)

    def test_nonblock_write_on_full_ring(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/sb", O_WR | O_NONBLOCK)
            buf = yield sc("sbrk", 10000 * 2)
            res["first"] = yield sc("write", fd, buf, 10000 * 2)
            res["second"] = yield sc("write", fd, buf, 2048)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        # ring (8192) + hardware fifo (1024) absorb the first burst
        assert res["first"] == (8192 + 1024) * 2
        assert res["second"] == -int(Err.WOULD_BLOCK)


class TestSurfaceDevice:
    def test_rect_before_config_rejected(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/surface", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            msg = struct.pack("<HHHHH", 0x7EC7, 0, 0, 1, 1) + b"\0\0\0\0"
            ctx.mem.write(buf, msg)
            res["rv"] = yield sc("write", fd, buf, len(msg))
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.PROTOCOL)

    def test_config_then_rect_marks_dirty(self, boot_p5):
        k = boot_p5(init_demo=False)

        def prog(ctx):
            fd = yield sc("open", "/dev/surface", O_WR)
            buf = yield sc("sbrk", 8 * PAGE_SIZE)
            cfg = struct.pack("<HHHH", 0xC0F1, 100, 50, 0)
            ctx.mem.write(buf, cfg)
            yield sc("write", fd, buf, len(cfg))
            rect = struct.pack("<HHHHH", 0x7EC7, 0, 0, 100, 50)
            ctx.mem.write(buf, rect + b"\x80" * (100 * 50 * 4))
            yield sc("write", fd, buf, len(rect) + 100 * 50 * 4)
            yield sc("sleep", 1000)  # stay alive for inspection
            return 0

        t = start_guest(k, prog)
        k.step(1_000)
        surf = k.wm.surface_for_task(t)
        assert surf.dirty and surf.dirty[-1] == (0, 0, 100, 50)
        assert (surf.pixels == 0x80).all()
        finish(k, t, ticks=1_100_000)

    def test_out_of_bounds_rect_rejected(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/surface", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            cfg = struct.pack("<HHHH", 0xC0F1, 10, 10, 0)
            ctx.mem.write(buf, cfg)
            yield sc("write", fd, buf, len(cfg))
            rect = struct.pack("<HHHHH", 0x7EC7, 8, 8, 4, 4) + b"\0" * 64
            ctx.mem.write(buf, rect)
            res["rv"] = yield sc("write", fd, buf, len(rect))
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.PROTOCOL)


class TestConsole:
    def test_line_discipline_cooks_shift_and_echo(self, boot_p4):
        k = boot_p4()
        k.step(30_000)
        type_text(k, "echo Hello!\n")
        k.step(2_000_000)
        out = uart_text(k)
        assert "$ echo Hello!" in out
        assert "\nHello!\n" in out

    def test_backspace_edits_line(self, boot_p4):
        k = boot_p4()
        k.step(30_000)
        type_text(k, "echo ab")
        k.inject_key(42, "press", [])   # backspace
        type_text(k, "c\n")
        k.step(2_000_000)
        assert "\nac\n" in uart_text(k)

    def test_keymap_round_trip(self):
        for ch in "azAZ09!? -=_[]\\;',./`~\n":
            code, shift = scancode_for_char(ch)
            mods = 2 if shift else 0
            assert cook_char(code, mods) == ch
