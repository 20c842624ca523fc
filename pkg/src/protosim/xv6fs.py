"""The ramdisk root filesystem: superblock, inode table, bitmap allocator
and flat directories, in the xv6 tradition.

Geometry is fixed by the file-size ceiling: 1024-byte blocks, 12 direct
block pointers and one 256-entry indirect block, capping files at
(12+256)*1024 = 274432 bytes. The on-disk field widths are this module's
own (upstream xv6 image compatibility is not claimed):

    superblock (block 0):  magic u32, size_blocks u32, ninodes u32,
                           inode_start u32, bitmap_start u32, data_start u32
    inode (64 bytes):      kind u16, nlink u16, size u32, direct[12] u32,
                           indirect u32, pad[8]
    dirent (16 bytes):     inum u16, name[14] (NUL padded)

The 64-byte inode leaves 4 pad bytes after the indirect pointer.
"""

import struct

from .errors import (BadImage, DiskFull, Exists, FileTooLarge, ImageFull,
                     NameTooLong, NotADirectory, NotFound)

BLOCK_SIZE = 1024
MAGIC = 0x78763666  # "xv6f"
NDIRECT = 12
NINDIRECT = BLOCK_SIZE // 4
MAX_FILE_BLOCKS = NDIRECT + NINDIRECT
MAX_FILE_BYTES = MAX_FILE_BLOCKS * BLOCK_SIZE  # 274432

INODE_SIZE = 64
INODES_PER_BLOCK = BLOCK_SIZE // INODE_SIZE
DIRENT_SIZE = 16
MAX_NAME = 14
ROOT_INUM = 1

T_FREE = 0
T_DIR = 1
T_FILE = 2

_SB = struct.Struct("<IIIIII")
_INODE = struct.Struct("<HHI12II4x")
_DIRENT = struct.Struct("<H14s")


class Superblock:
    def __init__(self, size_blocks, ninodes, inode_start, bitmap_start, data_start):
        self.size_blocks = size_blocks
        self.ninodes = ninodes
        self.inode_start = inode_start
        self.bitmap_start = bitmap_start
        self.data_start = data_start

    def pack(self):
        raw = _SB.pack(MAGIC, self.size_blocks, self.ninodes,
                       self.inode_start, self.bitmap_start, self.data_start)
        return raw + b"\0" * (BLOCK_SIZE - len(raw))

    @classmethod
    def unpack(cls, block):
        magic, size, ninodes, istart, bstart, dstart = _SB.unpack_from(block, 0)
        if magic != MAGIC:
            raise BadImage("not an xv6fs image (bad magic)")
        return cls(size, ninodes, istart, bstart, dstart)

    @classmethod
    def layout(cls, size_blocks, ninodes):
        inode_start = 1
        inode_blocks = -(-ninodes // INODES_PER_BLOCK)
        bitmap_start = inode_start + inode_blocks
        bitmap_blocks = -(-size_blocks // (BLOCK_SIZE * 8))
        data_start = bitmap_start + bitmap_blocks
        return cls(size_blocks, ninodes, inode_start, bitmap_start, data_start)


class DiskInode:
    __slots__ = ("kind", "nlink", "size", "direct", "indirect")

    def __init__(self, kind=T_FREE, nlink=0, size=0, direct=None, indirect=0):
        self.kind = kind
        self.nlink = nlink
        self.size = size
        self.direct = list(direct) if direct else [0] * NDIRECT
        self.indirect = indirect

    def pack(self):
        return _INODE.pack(self.kind, self.nlink, self.size, *self.direct,
                           self.indirect)

    @classmethod
    def unpack(cls, raw):
        vals = _INODE.unpack(raw)
        return cls(vals[0], vals[1], vals[2], vals[3:15], vals[15])


class Xv6Fs:
    """Filesystem logic over a 1024-byte-block I/O adapter.

    The adapter provides read_block(bno) -> bytes and write_block(bno, data);
    the live kernel backs it with the buffer cache, mkfs with a bytearray.
    """

    def __init__(self, bio):
        self.bio = bio
        self.sb = Superblock.unpack(self.bio.read_block(0))

    # -- inode table ----------------------------------------------------------

    def _inode_loc(self, inum):
        if not 0 < inum < self.sb.ninodes:
            raise NotFound(f"inode {inum} out of range")
        bno = self.sb.inode_start + inum // INODES_PER_BLOCK
        off = (inum % INODES_PER_BLOCK) * INODE_SIZE
        return bno, off

    def read_inode(self, inum):
        bno, off = self._inode_loc(inum)
        return DiskInode.unpack(self.bio.read_block(bno)[off : off + INODE_SIZE])

    def write_inode(self, inum, ino):
        bno, off = self._inode_loc(inum)
        block = bytearray(self.bio.read_block(bno))
        block[off : off + INODE_SIZE] = ino.pack()
        self.bio.write_block(bno, bytes(block))

    def alloc_inode(self, kind):
        for inum in range(1, self.sb.ninodes):
            if self.read_inode(inum).kind == T_FREE:
                ino = DiskInode(kind=kind, nlink=1)
                self.write_inode(inum, ino)
                return inum, ino
        raise DiskFull("inode table full")

    # -- block bitmap -----------------------------------------------------------

    def _bitmap_get(self, bno):
        blk = self.sb.bitmap_start + bno // (BLOCK_SIZE * 8)
        bit = bno % (BLOCK_SIZE * 8)
        data = self.bio.read_block(blk)
        return (data[bit // 8] >> (bit % 8)) & 1

    def _bitmap_set(self, bno, value):
        blk = self.sb.bitmap_start + bno // (BLOCK_SIZE * 8)
        bit = bno % (BLOCK_SIZE * 8)
        data = bytearray(self.bio.read_block(blk))
        if value:
            data[bit // 8] |= 1 << (bit % 8)
        else:
            data[bit // 8] &= ~(1 << (bit % 8))
        self.bio.write_block(blk, bytes(data))

    def balloc(self):
        for bno in range(self.sb.data_start, self.sb.size_blocks):
            if not self._bitmap_get(bno):
                self._bitmap_set(bno, 1)
                self.bio.write_block(bno, b"\0" * BLOCK_SIZE)
                return bno
        raise DiskFull("no free data blocks")

    def bfree(self, bno):
        assert self._bitmap_get(bno), f"freeing free block {bno}"
        self._bitmap_set(bno, 0)

    # -- block mapping -----------------------------------------------------------

    def bmap(self, ino, bn, alloc=False):
        """File block bn -> disk block, allocating on demand when asked."""
        if bn < NDIRECT:
            if ino.direct[bn] == 0:
                if not alloc:
                    return 0
                ino.direct[bn] = self.balloc()
            return ino.direct[bn]
        bn -= NDIRECT
        if bn >= NINDIRECT:
            raise FileTooLarge("beyond indirect block")
        if ino.indirect == 0:
            if not alloc:
                return 0
            ino.indirect = self.balloc()
        table = bytearray(self.bio.read_block(ino.indirect))
        (entry,) = struct.unpack_from("<I", table, bn * 4)
        if entry == 0:
            if not alloc:
                return 0
            entry = self.balloc()
            struct.pack_into("<I", table, bn * 4, entry)
            self.bio.write_block(ino.indirect, bytes(table))
        return entry

    # -- file contents -----------------------------------------------------------

    def inode_read(self, inum, off, n):
        ino = self.read_inode(inum)
        if off >= ino.size:
            return b""
        n = min(n, ino.size - off)
        out = bytearray()
        while n > 0:
            bn, boff = divmod(off, BLOCK_SIZE)
            chunk = min(n, BLOCK_SIZE - boff)
            disk_bno = self.bmap(ino, bn)
            if disk_bno == 0:
                out += b"\0" * chunk
            else:
                out += self.bio.read_block(disk_bno)[boff : boff + chunk]
            off += chunk
            n -= chunk
        return bytes(out)

    def inode_write(self, inum, off, data):
        ino = self.read_inode(inum)
        if off > ino.size:
            raise FileTooLarge("write past end (no holes)")
        if off + len(data) > MAX_FILE_BYTES:
            raise FileTooLarge(f"file would exceed {MAX_FILE_BYTES} bytes")
        i = 0
        while i < len(data):
            bn, boff = divmod(off + i, BLOCK_SIZE)
            chunk = min(len(data) - i, BLOCK_SIZE - boff)
            disk_bno = self.bmap(ino, bn, alloc=True)
            block = bytearray(self.bio.read_block(disk_bno))
            block[boff : boff + chunk] = data[i : i + chunk]
            self.bio.write_block(disk_bno, bytes(block))
            i += chunk
        if off + len(data) > ino.size:
            ino.size = off + len(data)
        self.write_inode(inum, ino)
        return len(data)

    def truncate(self, inum):
        """Free every data block and reset size to 0."""
        ino = self.read_inode(inum)
        for i in range(NDIRECT):
            if ino.direct[i]:
                self.bfree(ino.direct[i])
                ino.direct[i] = 0
        if ino.indirect:
            table = self.bio.read_block(ino.indirect)
            for i in range(NINDIRECT):
                (entry,) = struct.unpack_from("<I", table, i * 4)
                if entry:
                    self.bfree(entry)
            self.bfree(ino.indirect)
            ino.indirect = 0
        ino.size = 0
        self.write_inode(inum, ino)

    # -- directories -----------------------------------------------------------

    def dir_entries(self, dirinum):
        ino = self.read_inode(dirinum)
        if ino.kind != T_DIR:
            raise NotADirectory(f"inode {dirinum}")
        raw = self.inode_read(dirinum, 0, ino.size)
        out = []
        for off in range(0, len(raw) - len(raw) % DIRENT_SIZE, DIRENT_SIZE):
            inum, name = _DIRENT.unpack_from(raw, off)
            if inum:
                out.append((name.rstrip(b"\0").decode(), inum, off))
        return out

    def dirlookup(self, dirinum, name):
        for ename, inum, _ in self.dir_entries(dirinum):
            if ename == name:
                return inum
        raise NotFound(name)

    def dirlink(self, dirinum, name, inum):
        if len(name.encode()) > MAX_NAME:
            raise NameTooLong(name)
        ino = self.read_inode(dirinum)
        if ino.kind != T_DIR:
            raise NotADirectory(f"inode {dirinum}")
        raw = self.inode_read(dirinum, 0, ino.size)
        free_off = None
        for off in range(0, len(raw) - len(raw) % DIRENT_SIZE, DIRENT_SIZE):
            einum, ename = _DIRENT.unpack_from(raw, off)
            if einum == 0:
                free_off = off if free_off is None else free_off
            elif ename.rstrip(b"\0").decode() == name:
                raise Exists(name)
        entry = _DIRENT.pack(inum, name.encode())
        self.inode_write(dirinum, free_off if free_off is not None else ino.size,
                         entry)

    def dirunlink(self, dirinum, name):
        for ename, inum, off in self.dir_entries(dirinum):
            if ename == name:
                self.inode_write(dirinum, off, _DIRENT.pack(0, b""))
                return inum
        raise NotFound(name)

    # -- creation helpers --------------------------------------------------------

    def create(self, dirinum, name, kind):
        inum, ino = self.alloc_inode(kind)
        try:
            self.dirlink(dirinum, name, inum)
        except Exists:
            ino.kind = T_FREE
            ino.nlink = 0
            self.write_inode(inum, ino)
            raise
        if kind == T_DIR:
            self.dirlink(inum, ".", inum)
            self.dirlink(inum, "..", dirinum)
        return inum

    def link(self, inum, dirinum, name):
        self.dirlink(dirinum, name, inum)
        ino = self.read_inode(inum)
        ino.nlink += 1
        self.write_inode(inum, ino)

    def unlink(self, dirinum, name):
        """Drop a name; blocks are freed immediately when nlink hits 0."""
        inum = self.dirlookup(dirinum, name)
        ino = self.read_inode(inum)
        if ino.kind == T_DIR and any(
            n not in (".", "..") for n, _, _ in self.dir_entries(inum)
        ):
            raise Exists("directory not empty")
        self.dirunlink(dirinum, name)
        ino.nlink -= 1
        self.write_inode(inum, ino)
        if ino.nlink <= 0:
            self.truncate(inum)
            ino = self.read_inode(inum)
            ino.kind = T_FREE
            self.write_inode(inum, ino)
        return inum

    # -- integrity ---------------------------------------------------------------

    def fsck(self):
        """Walk all inodes; every data block must be referenced exactly once
        and the bitmap must match reachability. Returns (ok, problems)."""
        problems = []
        seen = {}
        for inum in range(1, self.sb.ninodes):
            ino = self.read_inode(inum)
            if ino.kind == T_FREE:
                continue
            refs = [b for b in ino.direct if b]
            if ino.indirect:
                refs.append(ino.indirect)
                table = self.bio.read_block(ino.indirect)
                refs += [e for (e,) in struct.iter_unpack("<I", table) if e]
            for b in refs:
                if b in seen:
                    problems.append(f"block {b} referenced by {seen[b]} and {inum}")
                seen[b] = inum
                if not (self.sb.data_start <= b < self.sb.size_blocks):
                    problems.append(f"block {b} outside data area (inode {inum})")
                elif not self._bitmap_get(b):
                    problems.append(f"block {b} in use but free in bitmap")
        for bno in range(self.sb.data_start, self.sb.size_blocks):
            if self._bitmap_get(bno) and bno not in seen:
                problems.append(f"block {bno} marked used but unreferenced")
        return not problems, problems


class MemBlockIO:
    """Adapter over a bytearray image, for mkfs and tests."""

    def __init__(self, image):
        self.image = image

    def read_block(self, bno):
        off = bno * BLOCK_SIZE
        return bytes(self.image[off : off + BLOCK_SIZE])

    def write_block(self, bno, data):
        off = bno * BLOCK_SIZE
        self.image[off : off + BLOCK_SIZE] = data


def mkfs(manifest, size_blocks=2048, ninodes=256):
    """Build an image from [(path, bytes)] entries; byte-deterministic.

    Paths are absolute; intermediate directories are created as needed.
    """
    sb = Superblock.layout(size_blocks, ninodes)
    image = bytearray(size_blocks * BLOCK_SIZE)
    image[:BLOCK_SIZE] = sb.pack()
    fs = Xv6Fs(MemBlockIO(image))
    # reserve metadata blocks in the bitmap
    for bno in range(sb.data_start):
        fs._bitmap_set(bno, 1)
    root = DiskInode(kind=T_DIR, nlink=1)
    fs.write_inode(ROOT_INUM, root)
    # root's inum scan must not hand out inode 1 again
    fs.dirlink(ROOT_INUM, ".", ROOT_INUM)
    fs.dirlink(ROOT_INUM, "..", ROOT_INUM)
    try:
        for path, data in manifest:
            parts = [p for p in path.split("/") if p]
            dirinum = ROOT_INUM
            for comp in parts[:-1]:
                try:
                    dirinum = fs.dirlookup(dirinum, comp)
                except NotFound:
                    dirinum = fs.create(dirinum, comp, T_DIR)
            inum = fs.create(dirinum, parts[-1], T_FILE)
            fs.inode_write(inum, 0, data)
    except DiskFull as e:
        raise ImageFull(str(e)) from e
    return bytes(image)
