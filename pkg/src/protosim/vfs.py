"""Path resolution with mount dispatch, the fd/OpenFile layer, pipes, the
single-block buffer cache with its FAT32 range bypass, and procfs.

Mount routing: "/d" prefixes go to the FAT32 volume (prefix stripped),
"/dev/..." to the device registry, "/proc/..." to procfs, everything else
to the xv6fs root. Blocking operations are generators that park on
channels; the kernel trampoline drives them.
"""

import struct
from collections import OrderedDict

from . import fatfs, xv6fs
from .errors import (BrokenPipe, Err, Exists, IllegalSeek, NotADirectory,
                     NotFound, OutOfRange, ReadOnlyFs, SimError, Unsupported,
                     WouldBlock)
from .sched import Channel, TaskState

CACHE_SLOTS = 64
SECTOR = 512

PIPE_CAP = 512
PIPE_ATOMIC = 64

MAX_FDS = 16

# Polled SD transfers burn CPU per byte moved (no DMA): 35/64 ticks/byte,
# putting FAT throughput in the several-hundred-KB/s range on both the
# cached and the bypass route.
PIO_COST_NUM = 35
PIO_COST_DEN = 64

O_RD = 1
O_WR = 2
O_NONBLOCK = 4
O_CREATE = 8

SEEK_SET = 0
SEEK_CUR = 1
SEEK_END = 2

KIND_FILE = 1
KIND_DIR = 2
KIND_DEVICE = 3

# on-disk inode kind for device nodes created by mknod (extends xv6fs kinds)
T_DEVNODE = 3

# 16-byte stat record written to the guest: kind u16, pad u16, ident u32, size u64
STAT_FMT = struct.Struct("<HHIQ")
# 16-byte directory record returned by read() on a directory
DIRENT_FMT = struct.Struct("<H14s")


class BadFd(SimError):
    code = Err.BAD_FD


class TooManyFiles(SimError):
    code = Err.TOO_MANY_FILES


class BufCache:
    """64 single-sector slots, strict LRU, write-back on eviction."""

    def __init__(self, charge=None, slots=CACHE_SLOTS):
        self.slots = slots
        self.entries = OrderedDict()  # (dev, lba) -> [bytearray, dirty]
        self.charge = charge or (lambda ticks: None)
        self.hits = 0
        self.misses = 0

    def _evict_if_full(self):
        while len(self.entries) >= self.slots:
            (dev, lba), (data, dirty) = self.entries.popitem(last=False)
            if dirty:
                self.charge(dev.write(lba, 1, bytes(data)))

    def bread(self, dev, lba):
        key = (dev, lba)
        entry = self.entries.get(key)
        if entry is not None:
            self.hits += 1
            self.entries.move_to_end(key)
            return bytes(entry[0])
        self.misses += 1
        self._evict_if_full()
        data, cost = dev.read(lba, 1)
        self.charge(cost)
        self.entries[key] = [bytearray(data), False]
        return data

    def bwrite(self, dev, lba, data):
        assert len(data) == SECTOR
        key = (dev, lba)
        entry = self.entries.get(key)
        if entry is None:
            self._evict_if_full()
            # full-sector overwrite: no need to fetch the old contents
            self.entries[key] = [bytearray(data), True]
        else:
            entry[0][:] = data
            entry[1] = True
            self.entries.move_to_end(key)

    def flush_dev(self, dev):
        for (d, lba), entry in self.entries.items():
            if d is dev and entry[1]:
                self.charge(dev.write(lba, 1, bytes(entry[0])))
                entry[1] = False

    def read_range_bypass(self, dev, lba, count):
        """One ranged device read; overlapping dirty slots are flushed first
        and overlapping clean slots invalidated, keeping the cache coherent."""
        for key in [k for k in self.entries if k[0] is dev and lba <= k[1] < lba + count]:
            data, dirty = self.entries.pop(key)
            if dirty:
                self.charge(dev.write(key[1], 1, bytes(data)))
        data, cost = dev.read(lba, count)
        self.charge(cost)
        return data

    def write_range_bypass(self, dev, lba, count, data):
        """Ranged device write with the same coherence rule as ranged reads."""
        for key in [k for k in self.entries if k[0] is dev and lba <= k[1] < lba + count]:
            self.entries.pop(key)
        self.charge(dev.write(lba, count, data))


class CachedSectorIO:
    """fatfs adapter: metadata through the cache, contents around it."""

    def __init__(self, cache, dev):
        self.cache = cache
        self.dev = dev

    def bread(self, lba):
        return self.cache.bread(self.dev, lba)

    def bwrite(self, lba, data):
        self.cache.bwrite(self.dev, lba, data)

    def read_range(self, lba, count):
        return self.cache.read_range_bypass(self.dev, lba, count)

    def write_range(self, lba, count, data):
        self.cache.write_range_bypass(self.dev, lba, count, data)


class CachedBlockIO:
    """xv6fs adapter: 1024-byte fs blocks over two cached sectors each."""

    def __init__(self, cache, dev):
        self.cache = cache
        self.dev = dev

    def read_block(self, bno):
        return (self.cache.bread(self.dev, bno * 2)
                + self.cache.bread(self.dev, bno * 2 + 1))

    def write_block(self, bno, data):
        self.cache.bwrite(self.dev, bno * 2, data[:SECTOR])
        self.cache.bwrite(self.dev, bno * 2 + 1, data[SECTOR:])


class Inode:
    """VFS object dispatching to a backend; held alive by open files."""

    def __init__(self, backend, kind, handle=None, dev_id="", ident=0):
        self.backend = backend      # "xv6fs" | "fatfs" | "dev" | "proc" | "pipe"
        self.kind = kind
        self.handle = handle
        self.dev_id = dev_id
        self.ident = ident
        self.ref_count = 0


class OpenFile:
    def __init__(self, inode, flags):
        self.inode = inode
        self.offset = 0
        self.flags = flags
        self.ref_count = 1
        inode.ref_count += 1

    @property
    def nonblock(self):
        return bool(self.flags & O_NONBLOCK)


class FdTable:
    def __init__(self):
        self.slots = [None] * MAX_FDS
        self.share_count = 1  # clone()d threads share the whole table

    def install(self, of):
        for fd, slot in enumerate(self.slots):
            if slot is None:
                self.slots[fd] = of
                return fd
        raise TooManyFiles(f"more than {MAX_FDS} open files")

    def get(self, fd):
        if not 0 <= fd < MAX_FDS or self.slots[fd] is None:
            raise BadFd(f"fd {fd}")
        return self.slots[fd]

    def take(self, fd):
        of = self.get(fd)
        self.slots[fd] = None
        return of

    def dup_all(self):
        t = FdTable()
        for fd, of in enumerate(self.slots):
            if of is not None:
                of.ref_count += 1
                t.slots[fd] = of
        return t


class Pipe:
    """512-byte FIFO; writes of <= 64 bytes are placed atomically."""

    def __init__(self, vfs, pid):
        self.buf = bytearray()
        self.readers = 1
        self.writers = 1
        self.rd_ch = Channel(("pipe-rd", pid))
        self.wr_ch = Channel(("pipe-wr", pid))
        self.vfs = vfs
        self.bytes_in = 0
        self.bytes_out = 0

    def read(self, task, n, nonblock):
        while True:
            if self.buf:
                take = min(n, len(self.buf))
                out = bytes(self.buf[:take])
                del self.buf[:take]
                self.bytes_out += take
                self.vfs.kernel.sched.wakeup(self.wr_ch)
                return out
            if self.writers == 0:
                return b""
            if nonblock:
                raise WouldBlock("pipe empty")
            yield from self.vfs.kernel.sched.sleep_on(
                task, self.rd_ch, state=TaskState.BLOCKED)

    def write(self, task, data, nonblock):
        written = 0
        while written < len(data):
            if self.readers == 0:
                raise BrokenPipe("no readers")
            chunk = data[written : written + PIPE_ATOMIC]
            if PIPE_CAP - len(self.buf) >= len(chunk):
                self.buf += chunk
                written += len(chunk)
                self.bytes_in += len(chunk)
                self.vfs.kernel.sched.wakeup(self.rd_ch)
                continue
            if nonblock:
                if written:
                    return written
                raise WouldBlock("pipe full")
            yield from self.vfs.kernel.sched.sleep_on(
                task, self.wr_ch, state=TaskState.BLOCKED)
        return written

    def close_end(self, readable):
        if readable:
            self.readers -= 1
            if self.readers == 0:
                self.vfs.kernel.sched.wakeup(self.wr_ch)
        else:
            self.writers -= 1
            if self.writers == 0:
                self.vfs.kernel.sched.wakeup(self.rd_ch)


def normalize(path, cwd="/"):
    if not path.startswith("/"):
        path = cwd.rstrip("/") + "/" + path
    parts = []
    for comp in path.split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            if parts:
                parts.pop()
            continue
        parts.append(comp)
    return "/" + "/".join(parts)


class Vfs:
    def __init__(self, kernel):
        self.kernel = kernel
        self.cache = BufCache(charge=kernel.charge_current)
        self.rootdev = None
        self.rootfs = None
        self.fatdev = None
        self.fatvol = None
        self.devices = {}            # name -> device object (devio)
        self.fat_inodes = {}         # normalized volume path -> Inode
        self.xv6_inodes = {}         # inum -> Inode
        self._pipe_seq = 0

    # -- mounting ---------------------------------------------------------------

    def mount_root(self, dev):
        self.rootdev = dev
        self.rootfs = xv6fs.Xv6Fs(CachedBlockIO(self.cache, dev))

    def mount_fat(self, dev, use_bypass=True):
        self.fatdev = dev
        self.fatvol = fatfs.mount(CachedSectorIO(self.cache, dev),
                                  use_bypass=use_bypass)

    def register_device(self, name, device):
        self.devices[name] = device

    def sync(self):
        """Flush pseudo-inode metadata and every dirty cache slot."""
        for ino in self.fat_inodes.values():
            ino.handle.flush()
        for dev in (self.rootdev, self.fatdev):
            if dev is not None:
                self.cache.flush_dev(dev)

    # -- resolution ---------------------------------------------------------------

    def resolve(self, path, cwd="/"):
        """Absolute path -> Inode. Prefix routing per the mount table."""
        path = normalize(path, cwd)
        if path == "/d" or path.startswith("/d/"):
            if self.fatvol is None:
                raise NotFound("no FAT volume mounted")
            sub = path[2:] or "/"
            return self._fat_inode(sub)
        if path == "/dev" or path.startswith("/dev/"):
            name = path[5:]
            if not name:
                return Inode("devdir", KIND_DIR)
            dev = self.devices.get(name)
            if dev is None:
                raise NotFound(path)
            return Inode("dev", KIND_DEVICE, handle=dev, dev_id=name)
        if path == "/proc" or path.startswith("/proc/"):
            name = path[6:]
            if not name:
                return Inode("procdir", KIND_DIR)
            if name not in ("cpuinfo", "meminfo"):
                raise NotFound(path)
            return Inode("proc", KIND_FILE, handle=name)
        if self.rootfs is None:
            raise NotFound("no root filesystem mounted")
        inum = self._walk_xv6(path)
        return self._xv6_inode(inum)

    def _walk_xv6(self, path):
        inum = xv6fs.ROOT_INUM
        parts = [p for p in path.split("/") if p]
        for comp in parts:
            ino = self.rootfs.read_inode(inum)
            if ino.kind != xv6fs.T_DIR:
                raise NotADirectory(comp)
            inum = self.rootfs.dirlookup(inum, comp)
        return inum

    def _xv6_inode(self, inum):
        node = self.xv6_inodes.get(inum)
        if node is None:
            dino = self.rootfs.read_inode(inum)
            if dino.kind == xv6fs.T_DIR:
                kind = KIND_DIR
            elif dino.kind == T_DEVNODE:
                kind = KIND_DEVICE
            else:
                kind = KIND_FILE
            node = Inode("xv6fs", kind, handle=inum, ident=inum)
            if kind == KIND_DEVICE:
                name = self.rootfs.inode_read(inum, 0, 32).rstrip(b"\0").decode()
                dev = self.devices.get(name)
                if dev is None:
                    raise NotFound(f"device node {name}")
                node = Inode("dev", KIND_DEVICE, handle=dev, dev_id=name, ident=inum)
            self.xv6_inodes[inum] = node
        return node

    def _fat_inode(self, volpath):
        volpath = normalize(volpath)
        node = self.fat_inodes.get(volpath)
        if node is None:
            pi = self.fatvol.lookup(volpath)
            kind = KIND_DIR if pi.is_dir else KIND_FILE
            node = Inode("fatfs", kind, handle=pi,
                         ident=pi.first_cluster)
            node.volpath = volpath
            self.fat_inodes[volpath] = node
        return node

    def _drop_inode(self, inode):
        inode.ref_count -= 1
        if inode.ref_count > 0:
            return
        if inode.backend == "fatfs":
            inode.handle.flush()
            self.fat_inodes.pop(getattr(inode, "volpath", None), None)
        elif inode.backend == "xv6fs":
            self.xv6_inodes.pop(inode.handle, None)

    # -- open files -----------------------------------------------------------------

    def open(self, task, path, flags):
        if not flags & (O_RD | O_WR):
            flags |= O_RD
        if flags & O_NONBLOCK and not self.kernel.profile.has_nonblock:
            raise Unsupported("non-blocking IO needs profile p5")
        path = normalize(path, task.cwd)
        try:
            inode = self.resolve(path)
        except NotFound:
            if not (flags & O_CREATE and flags & O_WR):
                raise
            inode = self._create_file(path)
        if flags & O_CREATE and inode.backend in ("proc", "procdir"):
            raise ReadOnlyFs(path)
        of = OpenFile(inode, flags)
        fd = task.fdtable.install(of)
        if inode.backend == "dev" and hasattr(inode.handle, "on_open"):
            inode.handle.on_open(of)
        return fd

    def _create_file(self, path):
        dirname, _, base = path.rpartition("/")
        dirname = dirname or "/"
        if path.startswith("/proc"):
            raise ReadOnlyFs(path)
        if path.startswith("/dev"):
            raise NotFound(path)
        if path == "/d" or path.startswith("/d/"):
            sub = path[2:]
            subdir, _, base = sub.rpartition("/")
            pi = self.fatvol.create(subdir or "/", base)
            node = Inode("fatfs", KIND_FILE, handle=pi, ident=pi.first_cluster)
            node.volpath = normalize(sub)
            self.fat_inodes[node.volpath] = node
            return node
        dirinum = self._walk_xv6(dirname)
        inum = self.rootfs.create(dirinum, base, xv6fs.T_FILE)
        return self._xv6_inode(inum)

    def close(self, task, fd):
        of = task.fdtable.take(fd)
        self.release_openfile(of)
        return 0

    def release_openfile(self, of):
        of.ref_count -= 1
        if of.ref_count > 0:
            return
        if of.inode.backend == "pipe":
            of.inode.handle.close_end(readable=bool(of.flags & O_RD))
        if of.inode.backend == "dev" and hasattr(of.inode.handle, "on_close"):
            of.inode.handle.on_close(of)
        self._drop_inode(of.inode)

    def dup(self, task, fd):
        of = task.fdtable.get(fd)
        of.ref_count += 1
        try:
            return task.fdtable.install(of)
        except TooManyFiles:
            of.ref_count -= 1
            raise

    # -- I/O ---------------------------------------------------------------------------

    def read(self, task, fd, n):
        """Backend-dispatched read; may block. Returns bytes ('' at EOF)."""
        of = task.fdtable.get(fd)
        if not of.flags & O_RD:
            raise BadFd("not open for reading")
        if n <= 0:
            return b""
        ino = of.inode
        if ino.backend == "xv6fs":
            data = self.rootfs.inode_read(ino.handle, of.offset, n)
            of.offset += len(data)
            return data
        if ino.backend == "fatfs":
            if ino.kind == KIND_DIR:
                data = self._fat_dir_records(ino)[of.offset : of.offset + n]
                of.offset += len(data)
                return data
            data = self.fatvol.read(ino.handle, of.offset, n)
            self.kernel.charge_current(len(data) * PIO_COST_NUM // PIO_COST_DEN)
            of.offset += len(data)
            return data
        if ino.backend == "proc":
            text = self.kernel.procfs_text(ino.handle).encode()
            data = text[of.offset : of.offset + n]
            of.offset += len(data)
            return data
        if ino.backend in ("devdir", "procdir"):
            data = self._listing_records(ino.backend)[of.offset : of.offset + n]
            of.offset += len(data)
            return data
        if ino.backend == "pipe":
            return (yield from ino.handle.read(task, n, of.nonblock))
        if ino.backend == "dev":
            return (yield from self._drive(ino.handle.read(self.kernel, task, of, n)))
        raise BadFd(f"unreadable backend {ino.backend}")

    def write(self, task, fd, data):
        of = task.fdtable.get(fd)
        if not of.flags & O_WR:
            raise BadFd("not open for writing")
        ino = of.inode
        if ino.backend == "xv6fs":
            if ino.kind == KIND_DIR:
                raise ReadOnlyFs("directory")
            n = self.rootfs.inode_write(ino.handle, of.offset, data)
            of.offset += n
            return n
        if ino.backend == "fatfs":
            if ino.kind == KIND_DIR:
                raise ReadOnlyFs("directory")
            n = self.fatvol.write(ino.handle, of.offset, data)
            self.kernel.charge_current(n * PIO_COST_NUM // PIO_COST_DEN)
            of.offset += n
            return n
        if ino.backend in ("proc", "procdir", "devdir"):
            raise ReadOnlyFs("procfs")
        if ino.backend == "pipe":
            return (yield from ino.handle.write(task, data, of.nonblock))
        if ino.backend == "dev":
            return (yield from self._drive(ino.handle.write(self.kernel, task, of, data)))
        raise BadFd(f"unwritable backend {ino.backend}")

    @staticmethod
    def _drive(result):
        """Let device handlers be plain functions or generators."""
        if hasattr(result, "send"):
            value = yield from result
            return value
        return result
        yield  # pragma: no cover

    def lseek(self, task, fd, off, whence):
        of = task.fdtable.get(fd)
        ino = of.inode
        seekable = ino.kind == KIND_FILE and ino.backend in ("xv6fs", "fatfs", "proc")
        # /dev/fb is the one seekable device: positioned writes are part of
        # its contract, mirroring fbdev.
        seekable = seekable or (ino.backend == "dev" and ino.dev_id == "fb")
        if not seekable:
            raise IllegalSeek(f"backend {ino.backend}")
        size = self._size_of(ino)
        base = {SEEK_SET: 0, SEEK_CUR: of.offset, SEEK_END: size}.get(whence)
        if base is None:
            raise OutOfRange(f"whence {whence}")
        new = base + off
        if new < 0 or new > size:
            raise OutOfRange(f"seek to {new}")
        of.offset = new
        return new

    def _size_of(self, ino):
        if ino.backend == "xv6fs":
            return self.rootfs.read_inode(ino.handle).size
        if ino.backend == "fatfs":
            return ino.handle.size if ino.kind == KIND_FILE else len(
                self._fat_dir_records(ino))
        if ino.backend == "proc":
            return len(self.kernel.procfs_text(ino.handle).encode())
        if ino.backend == "dev":
            return getattr(ino.handle, "size_bytes", 0)
        return 0

    def fstat(self, task, fd):
        """16-byte stat record (kind u16, pad, ident u32, size u64)."""
        of = task.fdtable.get(fd)
        ino = of.inode
        kind = {KIND_FILE: 1, KIND_DIR: 2, KIND_DEVICE: 3}[ino.kind]
        return STAT_FMT.pack(kind, 0, ino.ident & 0xFFFFFFFF, self._size_of(ino))

    # -- directory records ---------------------------------------------------------

    def _fat_dir_records(self, ino):
        out = bytearray()
        for name, _size, first, _kind in self.fatvol.readdir(ino.handle):
            out += DIRENT_FMT.pack(first & 0xFFFF, name.encode()[:14])
        return bytes(out)

    def _listing_records(self, backend):
        names = sorted(self.devices) if backend == "devdir" else ["cpuinfo", "meminfo"]
        out = bytearray()
        for i, name in enumerate(names, start=1):
            out += DIRENT_FMT.pack(i, name.encode()[:14])
        return bytes(out)

    # -- namespace ops -----------------------------------------------------------------

    def _xv6_parent(self, path, cwd):
        path = normalize(path, cwd)
        if path.startswith(("/d/", "/dev/", "/proc/")) or path in ("/d", "/dev", "/proc"):
            if path.startswith("/proc"):
                raise ReadOnlyFs(path)
            raise Unsupported(f"namespace op on {path}")
        dirname, _, base = path.rpartition("/")
        return self._walk_xv6(dirname or "/"), base

    def mkdir(self, task, path):
        dirinum, base = self._xv6_parent(path, task.cwd)
        self.rootfs.create(dirinum, base, xv6fs.T_DIR)
        return 0

    def unlink(self, task, path):
        dirinum, base = self._xv6_parent(path, task.cwd)
        inum = self.rootfs.unlink(dirinum, base)
        self.xv6_inodes.pop(inum, None)
        return 0

    def link(self, task, oldpath, newpath):
        old = normalize(oldpath, task.cwd)
        inum = self._walk_xv6(old)
        if self.rootfs.read_inode(inum).kind == xv6fs.T_DIR:
            raise Exists("cannot link directories")
        dirinum, base = self._xv6_parent(newpath, task.cwd)
        self.rootfs.link(inum, dirinum, base)
        return 0

    def mknod(self, task, path, dev_name):
        if dev_name not in self.devices:
            raise NotFound(f"device {dev_name}")
        dirinum, base = self._xv6_parent(path, task.cwd)
        inum = self.rootfs.create(dirinum, base, T_DEVNODE)
        self.rootfs.inode_write(inum, 0, dev_name.encode())
        return 0

    def chdir(self, task, path):
        path = normalize(path, task.cwd)
        node = self.resolve(path)
        if node.kind != KIND_DIR:
            raise NotADirectory(path)
        task.cwd = path
        return 0

    def pipe_create(self, task):
        self._pipe_seq += 1
        pipe = Pipe(self, self._pipe_seq)
        rd = OpenFile(Inode("pipe", KIND_FILE, handle=pipe), O_RD)
        wr = OpenFile(Inode("pipe", KIND_FILE, handle=pipe), O_WR)
        rfd = task.fdtable.install(rd)
        try:
            wfd = task.fdtable.install(wr)
        except TooManyFiles:
            task.fdtable.take(rfd)
            raise
        return rfd, wfd
