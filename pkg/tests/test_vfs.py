import struct

import pytest

from protosim.abi import Fork, sc
from protosim.errors import Err
from protosim.hwsim import BlockDev, BlockCost
from protosim.mem import PAGE_SIZE
from protosim.vfs import (BufCache, O_CREATE, O_NONBLOCK, O_RD, O_WR,
                          SEEK_CUR, SEEK_END, SEEK_SET, normalize)

from tests.test_proc import start_guest, finish


class TestResolve:
    def test_fat_prefix_routes_and_strips(self, boot_p5):
        k = boot_p5()
        pi = k.vfs.fatvol.create("/", "movie.dat")
        k.vfs.fatvol.write(pi, 0, b"MOVIE")
        pi.flush()
        node = k.vfs.resolve("/d/movie.dat")
        assert node.backend == "fatfs"
        assert k.vfs.fatvol.read(node.handle, 0, 5) == b"MOVIE"

    def test_dev_routes_to_device_registry(self, boot_p5):
        k = boot_p5()
        node = k.vfs.resolve("/dev/fb")
        assert node.backend == "dev" and node.dev_id == "fb"

    def test_plain_path_goes_to_rootfs(self, boot_p4):
        k = boot_p4()
        node = k.vfs.resolve("/README")
        assert node.backend == "xv6fs"

    def test_not_found_and_not_a_directory(self, boot_p4):
        k = boot_p4()
        from protosim.errors import NotADirectory, NotFound
        with pytest.raises(NotFound):
            k.vfs.resolve("/nope")
        with pytest.raises(NotADirectory):
            k.vfs.resolve("/README/deeper")

    def test_normalize(self):
        assert normalize("a/b", "/x") == "/x/a/b"
        assert normalize("/a/../b/./c") == "/b/c"
        assert normalize("..", "/") == "/"


class TestOpenClose:
    def test_nonblock_recorded_on_p5(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/dev/events", O_RD | O_NONBLOCK)
            res["fd"] = fd
            buf = yield sc("sbrk", PAGE_SIZE)
            res["read_rv"] = yield sc("read", fd, buf, 8)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["fd"] >= 0
        assert res["read_rv"] == -int(Err.WOULD_BLOCK)

    def test_nonblock_rejected_before_p5(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            res["fd"] = yield sc("open", "/dev/events", O_RD | O_NONBLOCK)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["fd"] == -int(Err.UNSUPPORTED)

    def test_seventeenth_fd_rejected(self, boot_p4):
        k = boot_p4()
        res = {"fds": []}

        def prog(ctx):
            while True:
                fd = yield sc("open", "/README", O_RD)
                if fd < 0:
                    res["err"] = fd
                    return 0
                res["fds"].append(fd)

        t = start_guest(k, prog)
        finish(k, t)
        # 3 console fds preinstalled; 13 more fit before the table is full
        assert len(res["fds"]) == 13
        assert res["err"] == -int(Err.TOO_MANY_FILES)

    def test_create_on_procfs_readonly(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            res["rv"] = yield sc("open", "/proc/newfile", O_WR | O_CREATE)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.READ_ONLY_FS)

    def test_smallest_free_fd(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            a = yield sc("open", "/README", O_RD)
            b = yield sc("open", "/README", O_RD)
            yield sc("close", a)
            c = yield sc("open", "/README", O_RD)
            res["abc"] = (a, b, c)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        a, b, c = res["abc"]
        assert c == a < b


class TestReadWriteSeek:
    def test_roundtrip_100_bytes(self, boot_p4):
        k = boot_p4()
        payload = bytes(range(100))
        res = {}

        def prog(ctx):
            buf = yield sc("sbrk", PAGE_SIZE)
            fd = yield sc("open", "/data.bin", O_WR | O_CREATE)
            ctx.mem.write(buf, payload)
            yield sc("write", fd, buf, 100)
            yield sc("close", fd)
            fd = yield sc("open", "/data.bin", O_RD)
            n = yield sc("read", fd, buf + 1024, 200)
            res["back"] = ctx.mem.read(buf + 1024, n)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["back"] == payload

    def test_read_zero_is_identity(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            buf = yield sc("sbrk", PAGE_SIZE)
            fd = yield sc("open", "/README", O_RD)
            res["zero"] = yield sc("read", fd, buf, 0)
            res["after"] = yield sc("lseek", fd, 0, SEEK_CUR)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["zero"] == 0 and res["after"] == 0

    def test_lseek_on_pipe_is_illegal(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            rfd, wfd = yield sc("pipe")
            res["rv"] = yield sc("lseek", rfd, 0, SEEK_SET)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.ILLEGAL_SEEK)

    def test_lseek_whence_and_bounds(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/README", O_RD)
            size = 25  # README length
            res["end"] = yield sc("lseek", fd, 0, SEEK_END)
            res["past"] = yield sc("lseek", fd, 1, SEEK_END)
            res["neg"] = yield sc("lseek", fd, -9999, SEEK_SET)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["end"] == 25
        assert res["past"] == -int(Err.OUT_OF_RANGE)
        assert res["neg"] == -int(Err.OUT_OF_RANGE)

    def test_fd_table_isolation_across_tasks(self, boot_p4):
        k = boot_p4()
        res = {}

        def other(ctx):
            fd = yield sc("open", "/README", O_RD)
            res["other_fd"] = fd
            return 0

        def prog(ctx):
            fd = yield sc("open", "/README", O_RD)
            res["mine"] = fd
            yield Fork(other)
            yield sc("wait")
            # my table unchanged by the child's opens
            buf = yield sc("sbrk", PAGE_SIZE)
            res["still_readable"] = (yield sc("read", fd, buf, 4)) == 4
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["still_readable"]


class TestPipes:
    def test_fifo_roundtrip(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            rfd, wfd = yield sc("pipe")
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"AB")
            yield sc("write", wfd, buf, 2)
            n = yield sc("read", rfd, buf + 100, 2)
            res["data"] = ctx.mem.read(buf + 100, n)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["data"] == b"AB"

    def test_broken_pipe_on_write_without_readers(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            rfd, wfd = yield sc("pipe")
            yield sc("close", rfd)
            buf = yield sc("sbrk", PAGE_SIZE)
            res["rv"] = yield sc("write", wfd, buf, 4)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.BROKEN_PIPE)

    def test_eof_when_writers_close(self, boot_p4):
        k = boot_p4()
        res = {}

        def child(wfd):
            def body(ctx):
                buf = yield sc("sbrk", PAGE_SIZE)
                ctx.mem.write(buf, b"xyz")
                yield sc("write", wfd, buf, 3)
                return 0
            return body

        def prog(ctx):
            rfd, wfd = yield sc("pipe")
            yield Fork(child(wfd))
            yield sc("close", wfd)
            buf = yield sc("sbrk", PAGE_SIZE)
            out = bytearray()
            while True:
                n = yield sc("read", rfd, buf, 16)
                if n == 0:
                    break
                out += ctx.mem.read(buf, n)
            res["data"] = bytes(out)
            yield sc("wait")
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["data"] == b"xyz"

    def test_two_writers_records_never_torn(self, boot_p4):
        k = boot_p4()
        NREC = 300  # 300 x 8-byte records per writer
        res = {}

        def writer(wfd, tag):
            def body(ctx):
                buf = yield sc("sbrk", PAGE_SIZE)
                for i in range(NREC):
                    rec = struct.pack("<II", tag, i)
                    ctx.mem.write(buf, rec)
                    rv = yield sc("write", wfd, buf, 8)
                    assert rv == 8
                return 0
            return body

        def prog(ctx):
            rfd, wfd = yield sc("pipe")
            yield Fork(writer(wfd, 1))
            yield Fork(writer(wfd, 2))
            yield sc("close", wfd)
            buf = yield sc("sbrk", PAGE_SIZE)
            seen = {1: [], 2: []}
            blob = bytearray()
            while True:
                n = yield sc("read", rfd, buf, 64)
                if n == 0:
                    break
                blob += ctx.mem.read(buf, n)
            for off in range(0, len(blob), 8):
                tag, i = struct.unpack_from("<II", blob, off)
                seen[tag].append(i)
            res["seen"] = seen
            yield sc("wait")
            yield sc("wait")
            return 0

        t = start_guest(k, prog)
        finish(k, t, ticks=20_000_000)
        assert res["seen"][1] == list(range(NREC))
        assert res["seen"][2] == list(range(NREC))


class TestBufCache:
    def make_cache(self):
        charges = []
        cache = BufCache(charge=charges.append)
        dev = BlockDev(size_sectors=256, cost=BlockCost(per_op=10, per_sector=1))
        return cache, dev, charges

    def test_second_read_hits_cache(self):
        cache, dev, _ = self.make_cache()
        cache.bread(dev, 5)
        ops_after_first = dev.ops
        cache.bread(dev, 5)
        assert dev.ops == ops_after_first

    def test_lru_eviction_at_65_blocks(self):
        cache, dev, _ = self.make_cache()
        for lba in range(65):
            cache.bread(dev, lba)
        assert (dev, 0) not in cache.entries
        assert (dev, 1) in cache.entries

    def test_dirty_writeback_on_eviction(self):
        cache, dev, _ = self.make_cache()
        cache.bwrite(dev, 0, b"\xab" * 512)
        for lba in range(1, 65):
            cache.bread(dev, lba)
        assert bytes(dev.data[:512]) == b"\xab" * 512

    def test_bypass_flushes_dirty_overlap(self):
        cache, dev, _ = self.make_cache()
        cache.bwrite(dev, 3, b"\xcd" * 512)
        data = cache.read_range_bypass(dev, 0, 8)
        assert data[3 * 512 : 4 * 512] == b"\xcd" * 512
        assert (dev, 3) not in cache.entries

    def test_bypass_invalidates_clean_overlap(self):
        cache, dev, _ = self.make_cache()
        cache.bread(dev, 2)
        cache.read_range_bypass(dev, 0, 4)
        assert (dev, 2) not in cache.entries

    def test_bypass_vs_single_latency_ratio(self, ramdisk, fat_image):
        """End-to-end simulated latency of reading 1 MB from FAT: the
        single-block route is 2x-3x slower than the ranged bypass."""
        from protosim.kernel import Kernel
        import random

        payload = random.Random(0).randbytes(1 << 20)

        def measure(bypass):
            k = Kernel(profile="p5", seed=0, ramdisk=ramdisk, fat=fat_image,
                       init_demo=False, fat_bypass=bypass)
            pi = k.vfs.fatvol.create("/", "big.dat")
            k.vfs.fatvol.write(pi, 0, payload)
            pi.flush()
            res = {}

            def prog(ctx):
                buf = yield sc("sbrk", 1 << 20)
                fd = yield sc("open", "/d/big.dat", O_RD)
                t0 = yield sc("uptime")
                got = 0
                while got < (1 << 20):
                    n = yield sc("read", fd, buf, 1 << 20)
                    if n <= 0:
                        break
                    got += n
                res["latency"] = (yield sc("uptime")) - t0
                res["got"] = got
                return 0

            t = start_guest(k, prog)
            finish(k, t, ticks=4_000_000)
            assert res["got"] == 1 << 20
            return res["latency"]

        slow = measure(bypass=False)
        fast = measure(bypass=True)
        assert 2.0 <= slow / fast <= 3.0, f"ratio {slow / fast:.2f}"

    def test_write_range_bypass_coherent(self):
        cache, dev, _ = self.make_cache()
        cache.bread(dev, 2)
        cache.bwrite(dev, 3, b"\x11" * 512)
        cache.write_range_bypass(dev, 0, 8, b"\x77" * 4096)
        assert (dev, 2) not in cache.entries and (dev, 3) not in cache.entries
        assert cache.bread(dev, 3) == b"\x77" * 512


class TestProcFs:
    def test_formats(self, boot_p4):
        k = boot_p4()
        k.step(150_000)
        cpu = k.procfs_text("cpuinfo")
        mem = k.procfs_text("meminfo")
        for i in range(k.profile.ncores):
            assert f"core{i} util " in cpu
        assert mem.startswith("pages free ")
        parts = mem.split()
        assert int(parts[2]) <= int(parts[4])

    def test_reads_are_side_effect_free(self, boot_p4):
        k = boot_p4()
        k.step(50_000)
        a = k.procfs_text("meminfo")
        b = k.procfs_text("meminfo")
        assert a == b
        ok, _ = k.audit_pages()
        assert ok

    def test_guest_read_via_fd(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/proc/meminfo", O_RD)
            buf = yield sc("sbrk", PAGE_SIZE)
            n = yield sc("read", fd, buf, 256)
            res["text"] = ctx.mem.read(buf, n).decode()
            res["write_rv"] = yield sc("open", "/proc/meminfo", O_WR)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["text"].startswith("pages free ")


class TestNamespaceOps:
    def test_mkdir_chdir_relative_paths(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            yield sc("mkdir", "/work")
            yield sc("chdir", "/work")
            fd = yield sc("open", "notes.txt", O_WR | O_CREATE)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"rel")
            yield sc("write", fd, buf, 3)
            yield sc("close", fd)
            fd = yield sc("open", "/work/notes.txt", O_RD)
            res["found"] = fd >= 0
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["found"]

    def test_unlink_then_open_fails(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            fd = yield sc("open", "/gone.txt", O_WR | O_CREATE)
            yield sc("close", fd)
            yield sc("unlink", "/gone.txt")
            res["rv"] = yield sc("open", "/gone.txt", O_RD)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["rv"] == -int(Err.NOT_FOUND)

    def test_link_shares_content(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            buf = yield sc("sbrk", PAGE_SIZE)
            fd = yield sc("open", "/orig", O_WR | O_CREATE)
            ctx.mem.write(buf, b"linked")
            yield sc("write", fd, buf, 6)
            yield sc("close", fd)
            yield sc("link", "/orig", "/alias")
            fd = yield sc("open", "/alias", O_RD)
            n = yield sc("read", fd, buf + 64, 16)
            res["data"] = ctx.mem.read(buf + 64, n)
            yield sc("unlink", "/orig")
            fd2 = yield sc("open", "/alias", O_RD)
            res["alias_alive"] = fd2 >= 0
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["data"] == b"linked"
        assert res["alias_alive"]

    def test_mknod_device_node(self, boot_p4):
        k = boot_p4()
        res = {}

        def prog(ctx):
            yield sc("mknod", "/myfb", "fb")
            fd = yield sc("open", "/myfb", O_WR)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"\xff" * 16)
            res["written"] = yield sc("write", fd, buf, 16)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["written"] == 16
        assert k.hw.fb.shadow.reshape(-1)[0] == 255

    def test_fat_close_writes_dirent_back(self, boot_p5):
        """size/first-cluster reach the on-disk dirent at close + sync."""
        from tests.fat_oracle import OracleVolume
        k = boot_p5()

        def prog(ctx):
            fd = yield sc("open", "/d/note.txt", O_WR | O_CREATE)
            buf = yield sc("sbrk", PAGE_SIZE)
            ctx.mem.write(buf, b"persisted")
            yield sc("write", fd, buf, 9)
            yield sc("close", fd)
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        k.vfs.sync()
        oracle = OracleVolume(k.hw.blockdevs["sd"].data)
        assert oracle.read_file("NOTE.TXT") == b"persisted"

    def test_namespace_ops_unsupported_on_fat(self, boot_p5):
        k = boot_p5()
        res = {}

        def prog(ctx):
            res["mkdir"] = yield sc("mkdir", "/d/sub")
            res["unlink"] = yield sc("unlink", "/d/x")
            return 0

        t = start_guest(k, prog)
        finish(k, t)
        assert res["mkdir"] == -int(Err.UNSUPPORTED)
        assert res["unlink"] == -int(Err.UNSUPPORTED)
