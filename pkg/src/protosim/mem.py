"""Guest memory: physical page allocator, per-task address spaces, the
translate() gate every guest access goes through, demand-paged stacks,
eager fork copies and thread sharing.

User addresses live below 2^39; the kernel half (0xffff-prefixed) can
never appear in a user address space. The framebuffer aperture is mapped
as device pages above DRAM so early profiles can render directly.
"""

import heapq
from dataclasses import dataclass

from .errors import OutOfMemory, OutOfRange

PAGE_SIZE = 4096
PAGE_SHIFT = 12
USER_VA_LIMIT = 1 << 39
KERNEL_VA_PREFIX = 0xFFFF_0000_0000_0000
BLOCK_1MB = 1 << 20

# Demand-paged user stack: 16 pages max, top page premapped at exec.
STACK_PAGES = 16
STACK_TOP = 0x8000_0000
STACK_LOW = STACK_TOP - STACK_PAGES * PAGE_SIZE

# Device aperture for the framebuffer, above DRAM; identity-mapped when a
# profile grants direct rendering.
FB_APERTURE_PA = 0x4000_0000
FB_APERTURE_VA = FB_APERTURE_PA

PERM_R = 1
PERM_W = 2
PERM_X = 4

# Exit codes for kernel-initiated termination.
EXIT_FAULT_KILL = 139
EXIT_OOM_KILL = 137


@dataclass(frozen=True)
class Fault:
    """Translation failure as a value; carries the faulting address."""

    va: int


class PhysAllocator:
    """Page-number allocator over simulated DRAM.

    Hands out the lowest free page for reproducibility. Pages below
    `kernel_held` belong to the kernel image/ramdisk and never circulate.
    """

    def __init__(self, total_pages, kernel_held=4096):
        self.total_pages = total_pages
        self.kernel_held = kernel_held
        self._watermark = kernel_held
        self._recycled = []
        self._allocated = set()

    @property
    def free_pages(self):
        return self.total_pages - self.kernel_held - len(self._allocated)

    def alloc(self):
        if self._recycled:
            pn = heapq.heappop(self._recycled)
        elif self._watermark < self.total_pages:
            pn = self._watermark
            self._watermark += 1
        else:
            raise OutOfMemory("no free pages")
        self._allocated.add(pn)
        return pn

    def alloc_many(self, n):
        if n > self.free_pages:
            raise OutOfMemory(f"need {n} pages, have {self.free_pages}")
        return [self.alloc() for _ in range(n)]

    def free(self, pn):
        if pn not in self._allocated:
            raise AssertionError(f"double free of page {pn}")
        self._allocated.discard(pn)
        heapq.heappush(self._recycled, pn)


@dataclass
class Regions:
    code_lo: int = 0
    code_hi: int = 0          # exclusive
    heap_brk: int = 0
    stack_lo: int = STACK_LOW
    stack_hi: int = STACK_TOP  # exclusive


class AddressSpace:
    """Page-granular user mapping, shareable between clone()d tasks."""

    def __init__(self, allocator: PhysAllocator):
        self.allocator = allocator
        self.pages = {}          # va_page -> (phys_page, perms, is_device)
        self.regions = Regions()
        self.share_count = 1

    def map_page(self, va_page, phys_page, perms, device=False):
        va = va_page << PAGE_SHIFT
        if va >= USER_VA_LIMIT and not device:
            raise OutOfRange(f"user va 0x{va:x} beyond user range")
        if va & KERNEL_VA_PREFIX == KERNEL_VA_PREFIX:
            raise OutOfRange("kernel range in user space")
        assert va_page not in self.pages, f"page 0x{va_page:x} double-mapped"
        self.pages[va_page] = (phys_page, perms, device)

    def unmap_page(self, va_page, free=True):
        phys, _, device = self.pages.pop(va_page)
        if free and not device:
            self.allocator.free(phys)

    def mapped_ram_pages(self):
        return sum(1 for (_, _, dev) in self.pages.values() if not dev)

    def release(self):
        """Drop one reference; frees every RAM page when the count hits 0."""
        self.share_count -= 1
        if self.share_count == 0:
            for va_page in list(self.pages):
                self.unmap_page(va_page)

    def in_stack(self, va):
        return self.regions.stack_lo <= va < self.regions.stack_hi

    def in_code(self, va):
        return self.regions.code_lo <= va < self.regions.code_hi

    def in_heap(self, va):
        return self.regions.code_hi <= va < self.regions.heap_brk


def translate(aspace: AddressSpace, va, access=PERM_R):
    """Resolve a user virtual address or return Fault(va). No side effects."""
    if va < 0 or va >= USER_VA_LIMIT:
        return Fault(va)
    entry = aspace.pages.get(va >> PAGE_SHIFT)
    if entry is None:
        return Fault(va)
    phys_page, perms, _ = entry
    if access & ~perms:
        return Fault(va)
    return (phys_page << PAGE_SHIFT) | (va & (PAGE_SIZE - 1))


class KernelMap:
    """Boot-time identity map of DRAM and device apertures in 1 MB blocks."""

    NORMAL = "normal"
    DEVICE = "device"

    def __init__(self):
        self.blocks = {}  # pa (1MB aligned) -> attribute

    def add_range(self, pa, length, attr):
        if pa % BLOCK_1MB or length % BLOCK_1MB:
            raise OutOfRange("kernel map blocks must be 1MB aligned")
        for off in range(0, length, BLOCK_1MB):
            block = pa + off
            if block in self.blocks:
                raise OutOfRange(f"kernel map overlap at 0x{block:x}")
            self.blocks[block] = attr

    def attribute(self, pa):
        return self.blocks.get(pa - (pa % BLOCK_1MB))

    @classmethod
    def boot_map(cls, dram_bytes, fb_bytes):
        m = cls()
        m.add_range(0, dram_bytes, cls.NORMAL)
        fb_len = -(-fb_bytes // BLOCK_1MB) * BLOCK_1MB
        m.add_range(FB_APERTURE_PA, fb_len, cls.DEVICE)
        return m


class MemoryManager:
    """Owns the allocator and implements paging policy over address spaces."""

    def __init__(self, hw, allocator=None):
        self.hw = hw
        self.allocator = allocator or PhysAllocator(hw.ram.total_pages)
        self.kernel_map = KernelMap.boot_map(
            hw.ram.total_pages * PAGE_SIZE, hw.fb.size_bytes
        )

    # -- physical access (kernel side of every guest load/store) ------------

    def phys_read(self, pa, n):
        if pa >= FB_APERTURE_PA:
            return self.hw.fb.read_bytes(pa - FB_APERTURE_PA, n)
        out = bytearray()
        while n:
            page, off = divmod(pa, PAGE_SIZE)
            chunk = min(n, PAGE_SIZE - off)
            out += self.hw.ram.page(page)[off : off + chunk]
            pa += chunk
            n -= chunk
        return bytes(out)

    def phys_write(self, pa, data):
        if pa >= FB_APERTURE_PA:
            self.hw.fb.write_bytes(pa - FB_APERTURE_PA, data)
            return
        i = 0
        while i < len(data):
            page, off = divmod(pa + i, PAGE_SIZE)
            chunk = min(len(data) - i, PAGE_SIZE - off)
            self.hw.ram.page(page)[off : off + chunk] = data[i : i + chunk]
            i += chunk

    # -- address space construction -----------------------------------------

    def new_aspace(self):
        return AddressSpace(self.allocator)

    def map_fresh(self, aspace, va_page, perms, zero=False):
        pn = self.allocator.alloc()
        if zero:
            self.hw.ram.zero_page(pn)
        aspace.map_page(va_page, pn, perms)
        return pn

    def map_fb_aperture(self, aspace):
        """Identity-map the framebuffer as device pages (direct rendering)."""
        npages = -(-self.hw.fb.size_bytes // PAGE_SIZE)
        base = FB_APERTURE_VA >> PAGE_SHIFT
        for i in range(npages):
            if base + i not in aspace.pages:
                aspace.map_page(base + i, base + i, PERM_R | PERM_W, device=True)

    # -- fault handling -------------------------------------------------------

    MAPPED = "mapped"
    KILLED = "killed"

    def handle_fault(self, task, va):
        """Demand-page a stack touch or kill the task.

        A second consecutive fault at the same address means the previous
        handling did not help: the task is terminated. Addresses outside
        every region are fatal immediately.
        """
        aspace = task.aspace
        rec_va, rec_count = task.fault_record
        if rec_va == va and rec_count >= 1:
            task.kill(EXIT_FAULT_KILL)
            return self.KILLED
        va_page = va >> PAGE_SHIFT
        if aspace.in_stack(va):
            if va_page not in aspace.pages:
                try:
                    self.map_fresh(aspace, va_page, PERM_R | PERM_W)
                except OutOfMemory:
                    task.kill(EXIT_OOM_KILL)
                    return self.KILLED
            task.fault_record = (va, 1)
            return self.MAPPED
        if aspace.in_code(va) or aspace.in_heap(va):
            # Mapped-but-denied (or stray hole) inside a region: allow one
            # retry; the repeat-fault rule above turns persistence into a kill.
            task.fault_record = (va, 1)
            return self.MAPPED
        task.kill(EXIT_FAULT_KILL)
        return self.KILLED

    # -- syscall-level operations ---------------------------------------------

    def sbrk(self, task, delta):
        """Grow or shrink the heap; returns the old break address."""
        aspace = task.aspace
        old = aspace.regions.heap_brk
        new = old + delta
        if new < aspace.regions.code_hi or new > aspace.regions.stack_lo:
            raise OutOfRange(f"brk 0x{new:x} outside heap range")
        if delta > 0:
            first = -(-old // PAGE_SIZE)  # first page not yet mapped
            last = -(-new // PAGE_SIZE)
            need = [p for p in range(first, last) if p not in aspace.pages]
            if len(need) > self.allocator.free_pages:
                raise OutOfMemory("sbrk growth")
            for p in need:
                self.map_fresh(aspace, p, PERM_R | PERM_W, zero=True)
        elif delta < 0:
            first = -(-new // PAGE_SIZE)
            last = -(-old // PAGE_SIZE)
            for p in range(first, last):
                if p in aspace.pages:
                    aspace.unmap_page(p)
        aspace.regions.heap_brk = new
        return old

    def as_fork(self, src: AddressSpace):
        """Eager deep copy; either fully succeeds or leaves nothing allocated."""
        ram_pages = [(vp, e) for vp, e in src.pages.items() if not e[2]]
        if len(ram_pages) > self.allocator.free_pages:
            raise OutOfMemory("fork copy")
        dst = self.new_aspace()
        dst.regions = Regions(**vars(src.regions))
        for va_page, (phys, perms, _) in ram_pages:
            new_pn = self.allocator.alloc()
            self.hw.ram._pages[new_pn] = bytearray(self.hw.ram.page(phys))
            dst.map_page(va_page, new_pn, perms)
        for va_page, (phys, perms, dev) in src.pages.items():
            if dev:
                dst.map_page(va_page, phys, perms, device=True)
        return dst

    def as_share(self, src: AddressSpace):
        src.share_count += 1
        return src

    def audit(self, aspaces, extra_held=0):
        """Page conservation: free + mapped + kernel-held must equal total."""
        mapped = sum(a.mapped_ram_pages() for a in aspaces)
        total = self.allocator.total_pages
        free = self.allocator.free_pages
        held = self.allocator.kernel_held + extra_held
        return free + mapped + held == total, (free, mapped, held, total)
