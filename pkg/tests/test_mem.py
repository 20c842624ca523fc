import pytest

from protosim.errors import OutOfMemory, OutOfRange
from protosim.hwsim import Hardware
from protosim.kernel import Kernel
from protosim.mem import (EXIT_FAULT_KILL, EXIT_OOM_KILL, Fault, KernelMap,
                          MemoryManager, PAGE_SIZE, PERM_R, PERM_W,
                          PhysAllocator, STACK_TOP, translate)
from protosim.sched import TaskKind


@pytest.fixture
def mm():
    return MemoryManager(Hardware(seed=0, total_pages=262144))


def make_task(mm, stack_pages=1):
    """A minimal task-like object with a fresh address space."""
    k = Kernel(profile="p3", seed=0, init_demo=False)
    task = k.sched.create_task(TaskKind.USER, "t", 1)
    task.aspace = k.mem.new_aspace()
    task.aspace.regions.code_lo = 0x1000
    task.aspace.regions.code_hi = 0x3000
    task.aspace.regions.heap_brk = 0x3000
    k.mem.map_fresh(task.aspace, (STACK_TOP - PAGE_SIZE) // PAGE_SIZE,
                    PERM_R | PERM_W)
    return k, task


class TestTranslate:
    def test_empty_space_faults(self, mm):
        aspace = mm.new_aspace()
        result = translate(aspace, 0x0, PERM_R)
        assert isinstance(result, Fault) and result.va == 0

    def test_mapping_arithmetic(self, mm):
        aspace = mm.new_aspace()
        aspace.map_page(2, 7, PERM_R)
        assert translate(aspace, 0x2010, PERM_R) == 0x7010

    def test_write_to_readonly_faults(self, mm):
        aspace = mm.new_aspace()
        aspace.map_page(2, 7, PERM_R)
        assert isinstance(translate(aspace, 0x2010, PERM_W), Fault)

    def test_purity(self, mm):
        aspace = mm.new_aspace()
        aspace.map_page(5, 9, PERM_R | PERM_W)
        first = translate(aspace, 0x5123, PERM_R)
        for _ in range(10):
            assert translate(aspace, 0x5123, PERM_R) == first

    def test_kernel_range_never_mappable(self, mm):
        aspace = mm.new_aspace()
        with pytest.raises(OutOfRange):
            aspace.map_page(0xFFFF_0000_0000_0000 >> 12, 1, PERM_R)

    def test_user_va_limit(self, mm):
        aspace = mm.new_aspace()
        assert isinstance(translate(aspace, 1 << 39, PERM_R), Fault)


class TestDemandPaging:
    def test_stack_touch_maps_one_page(self):
        k, task = make_task(None)
        va = STACK_TOP - 2 * PAGE_SIZE  # one page below the premapped top
        assert k.mem.handle_fault(task, va) == k.mem.MAPPED
        assert translate(task.aspace, va, PERM_W) != Fault(va)
        assert task.fault_record == (va, 1)

    def test_linear_descent_maps_pages_one_by_one(self):
        k, task = make_task(None)
        mapped_before = task.aspace.mapped_ram_pages()
        for i in range(2, 10):
            va = STACK_TOP - i * PAGE_SIZE
            assert k.mem.handle_fault(task, va) == k.mem.MAPPED
        assert task.aspace.mapped_ram_pages() == mapped_before + 8

    def test_fault_outside_regions_kills(self):
        k, task = make_task(None)
        assert k.mem.handle_fault(task, 0xDEADBEEF) == k.mem.KILLED
        assert task.killed and task.kill_code == EXIT_FAULT_KILL

    def test_repeat_fault_same_va_kills(self):
        k, task = make_task(None)
        va = STACK_TOP - 2 * PAGE_SIZE
        assert k.mem.handle_fault(task, va) == k.mem.MAPPED
        assert k.mem.handle_fault(task, va) == k.mem.KILLED
        assert task.kill_code == EXIT_FAULT_KILL

    def test_oom_during_demand_page_kills_with_oom_code(self):
        k, task = make_task(None)
        k.mem.allocator._watermark = k.mem.allocator.total_pages
        k.mem.allocator._recycled.clear()
        va = STACK_TOP - 2 * PAGE_SIZE
        assert k.mem.handle_fault(task, va) == k.mem.KILLED
        assert task.kill_code == EXIT_OOM_KILL


class TestSbrk:
    def test_grow_maps_pages_eagerly_zeroed(self):
        k, task = make_task(None)
        old = k.mem.sbrk(task, 8192)
        assert old == 0x3000
        assert task.aspace.regions.heap_brk == 0x5000
        assert translate(task.aspace, 0x3000, PERM_W) > 0
        assert k.mem.phys_read(translate(task.aspace, 0x3000, PERM_R),
                               PAGE_SIZE) == b"\0" * PAGE_SIZE

    def test_sbrk_zero_is_identity(self):
        k, task = make_task(None)
        brk = task.aspace.regions.heap_brk
        assert k.mem.sbrk(task, 0) == brk
        assert task.aspace.regions.heap_brk == brk

    def test_shrink_unmaps_and_frees(self):
        k, task = make_task(None)
        k.mem.sbrk(task, 4 * PAGE_SIZE)
        free_before = k.mem.allocator.free_pages
        k.mem.sbrk(task, -2 * PAGE_SIZE)
        assert k.mem.allocator.free_pages == free_before + 2

    def test_beyond_stack_is_out_of_range(self):
        k, task = make_task(None)
        with pytest.raises(OutOfRange):
            k.mem.sbrk(task, STACK_TOP)

    def test_oom_leaves_brk_unchanged(self):
        k, task = make_task(None)
        brk = task.aspace.regions.heap_brk
        free = k.mem.allocator.free_pages
        with pytest.raises(OutOfMemory):
            k.mem.sbrk(task, (free + 10) * PAGE_SIZE)
        assert task.aspace.regions.heap_brk == brk


class TestForkShare:
    def test_fork_isolation(self):
        k, task = make_task(None)
        k.mem.sbrk(task, PAGE_SIZE)
        pa = translate(task.aspace, 0x3000, PERM_W)
        k.mem.phys_write(pa, b"parent")
        child_as = k.mem.as_fork(task.aspace)
        child_pa = translate(child_as, 0x3000, PERM_W)
        k.mem.phys_write(child_pa, b"child!")
        assert k.mem.phys_read(pa, 6) == b"parent"
        assert k.mem.phys_read(child_pa, 6) == b"child!"

    def test_fork_allocates_exactly_n_pages(self):
        k, task = make_task(None)
        k.mem.sbrk(task, 3 * PAGE_SIZE)
        n = task.aspace.mapped_ram_pages()
        free_before = k.mem.allocator.free_pages
        child_as = k.mem.as_fork(task.aspace)
        assert free_before - k.mem.allocator.free_pages == n
        child_as.release()
        assert k.mem.allocator.free_pages == free_before

    def test_fork_oom_is_atomic(self):
        k, task = make_task(None)
        k.mem.sbrk(task, 3 * PAGE_SIZE)
        k.mem.allocator._watermark = k.mem.allocator.total_pages
        k.mem.allocator._recycled.clear()
        free_before = k.mem.allocator.free_pages
        with pytest.raises(OutOfMemory):
            k.mem.as_fork(task.aspace)
        assert k.mem.allocator.free_pages == free_before

    def test_share_is_bidirectional(self):
        k, task = make_task(None)
        k.mem.sbrk(task, PAGE_SIZE)
        shared = k.mem.as_share(task.aspace)
        assert shared is task.aspace
        assert shared.share_count == 2
        pa = translate(shared, 0x3000, PERM_W)
        k.mem.phys_write(pa, b"X")
        assert k.mem.phys_read(translate(task.aspace, 0x3000, PERM_R), 1) == b"X"

    def test_share_release_frees_only_at_zero(self):
        k, task = make_task(None)
        k.mem.sbrk(task, PAGE_SIZE)
        k.mem.as_share(task.aspace)
        free_before = k.mem.allocator.free_pages
        task.aspace.release()
        assert k.mem.allocator.free_pages == free_before
        task.aspace.release()
        assert k.mem.allocator.free_pages > free_before


class TestConservation:
    def test_page_audit_through_syscall_sequence(self, boot_p4):
        k = boot_p4()
        k.step(200_000)
        ok, detail = k.audit_pages()
        assert ok, detail
        from tests.conftest import run_shell_command
        run_shell_command(k, "echo audit")
        ok, detail = k.audit_pages()
        assert ok, detail


class TestKernelMap:
    def test_boot_map_covers_dram_and_fb(self):
        hw = Hardware(seed=0)
        mm = MemoryManager(hw)
        assert mm.kernel_map.attribute(0) == KernelMap.NORMAL
        assert mm.kernel_map.attribute(512 * 1024 * 1024) == KernelMap.NORMAL
        from protosim.mem import FB_APERTURE_PA
        assert mm.kernel_map.attribute(FB_APERTURE_PA) == KernelMap.DEVICE

    def test_blocks_must_not_overlap(self):
        m = KernelMap()
        m.add_range(0, 1 << 20, KernelMap.NORMAL)
        with pytest.raises(OutOfRange):
            m.add_range(0, 1 << 20, KernelMap.DEVICE)

    def test_alignment_enforced(self):
        m = KernelMap()
        with pytest.raises(OutOfRange):
            m.add_range(4096, 1 << 20, KernelMap.NORMAL)


class TestAllocator:
    def test_double_free_asserts(self):
        alloc = PhysAllocator(8192, kernel_held=0)
        pn = alloc.alloc()
        alloc.free(pn)
        with pytest.raises(AssertionError):
            alloc.free(pn)

    def test_lowest_page_first(self):
        alloc = PhysAllocator(8192, kernel_held=100)
        a = alloc.alloc()
        b = alloc.alloc()
        assert (a, b) == (100, 101)
        alloc.free(a)
        assert alloc.alloc() == a
