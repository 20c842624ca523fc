from protosim.kernel import Kernel
from protosim.trace import TraceKind, TraceRing


class TestRing:
    def test_emit_then_dump_in_order(self):
        ring = TraceRing()
        for i in range(3):
            ring.emit(i, 0, TraceKind.USER_MARK, i, 0)
        recs = ring.dump(10)
        assert [r.a for r in recs] == [0, 1, 2]

    def test_wraparound_drops_oldest(self):
        ring = TraceRing(capacity=8)
        for i in range(9):
            ring.emit(i, 0, TraceKind.USER_MARK, i, 0)
        assert ring.wrapped
        recs = ring.dump(100)
        assert len(recs) == 8
        assert recs[0].a == 1  # record 0 overwritten

    def test_dump_zero_and_idempotence(self):
        ring = TraceRing()
        ring.emit(1, 0, TraceKind.USER_MARK, 7, 8)
        assert ring.dump(0) == []
        assert ring.dump(10) == ring.dump(10)

    def test_dump_more_than_emitted(self):
        ring = TraceRing()
        for i in range(3):
            ring.emit(i, 0, TraceKind.IRQ, 0, 0)
        assert len(ring.dump(10)) == 3

    def test_text_rendering_format(self):
        ring = TraceRing()
        ring.emit(42, 2, TraceKind.SCHED_SWITCH, 1, 9)
        assert ring.dump_text(1) == "42 2 SCHED_SWITCH 1 9"


class TestEmitEverywhere:
    def test_emit_inside_masked_region(self):
        k = Kernel(profile="p2", seed=0, init_demo=False)
        core = k.sched.cores[0]
        k.sched.push_off(core)
        before = k.trace.total
        k.trace.emit(k.hw.clock.now, 0, TraceKind.USER_MARK, 1, 2)
        assert k.trace.total == before + 1
        k.sched.pop_off(core)

    def test_tracing_is_observation_only(self, ramdisk):
        """Same boot, one run with extra emits: same schedule and screen."""
        def run(extra_emits):
            k = Kernel(profile="p4", seed=5, ramdisk=ramdisk)
            for _ in range(extra_emits):
                k.trace.emit(k.hw.clock.now, 0, TraceKind.USER_MARK, 0, 0)
            k.step(500_000)
            return k.ps_text(), k.hw.fb.visible.tobytes()

        assert run(0) == run(100)


class TestPanicButton:
    def test_round_robin_core_routing(self, boot_p5):
        k = boot_p5()
        handled = []
        for press in range(5):
            text = k.panic()
            handled.append(int(text.split("handled by core ")[1].split()[0]))
        assert handled == [0, 1, 2, 3, 0]

    def test_panic_bypasses_interrupt_masking(self, boot_p5):
        k = boot_p5()
        for core in k.sched.cores:
            k.sched.push_off(core)
        text = k.panic()
        assert "PANIC handled by core 0" in text
        for core in k.sched.cores:
            k.sched.pop_off(core)

    def test_panic_at_boot_shows_idle_cores(self, boot_p5):
        k = boot_p5(init_demo=False)
        text = k.panic()
        for i in range(4):
            assert f"core {i}: idle" in text

    def test_panic_during_simulated_deadlock(self, boot_p5):
        k = boot_p5()
        k.step(30_000)
        k.spawn("deadlock", [])
        k.step(300_000)
        text = k.panic()
        blocked = [l for l in text.splitlines()
                   if "deadlock" in l and "BLOCKED" in l]
        assert len(blocked) == 2
        assert all("channel=('sem'," in l for l in blocked)

    def test_dump_includes_trace_tail(self, boot_p5):
        k = boot_p5()
        k.step(50_000)
        text = k.panic()
        assert "trace tail" in text
        assert "IRQ" in text
