"""FAT32 read/write driver over a host-interoperable volume image.

Short (8.3) names only: long-name entries are skipped on read and never
generated. Metadata (BPB, FAT, directory entries) goes through the cached
sector path; file contents use ranged device access that bypasses the
buffer cache. Both FAT copies are kept identical on every update.

The mounted image is a bare volume (no partition table); the simulator's
two-partition layout is realized as two separate image files.
"""

import struct
from dataclasses import dataclass

from .errors import (BadSignature, CorruptChain, DiskFull, Exists,
                     NameTooLong, NotADirectory, NotFat32, NotFound)

SECTOR = 512
FAT32_MIN_CLUSTERS = 65525
EOC = 0x0FFFFFF8
FAT_MASK = 0x0FFFFFFF

ATTR_READ_ONLY = 0x01
ATTR_HIDDEN = 0x02
ATTR_SYSTEM = 0x04
ATTR_VOLUME_ID = 0x08
ATTR_DIRECTORY = 0x10
ATTR_ARCHIVE = 0x20
ATTR_LONG_NAME = 0x0F

DIRENT_SIZE = 32
DEL_MARK = 0xE5

# fixed timestamp written into new entries (no clock source claims here)
_EPOCH_DATE = ((2020 - 1980) << 9) | (1 << 5) | 1
_EPOCH_TIME = 0


class SectorIO:
    """Uncached adapter straight onto a block device (mkfat, tests)."""

    def __init__(self, dev):
        self.dev = dev

    def bread(self, lba):
        data, _ = self.dev.read(lba, 1)
        return data

    def bwrite(self, lba, data):
        self.dev.write(lba, 1, data)

    def read_range(self, lba, count):
        data, _ = self.dev.read(lba, count)
        return data

    def write_range(self, lba, count, data):
        self.dev.write(lba, count, data)


@dataclass
class DirentRef:
    lba: int
    offset: int  # byte offset within the sector


class PseudoInode:
    """Transient inode over a FAT file/directory; exists only while open."""

    def __init__(self, vol, name, first_cluster, size, is_dir, ref: DirentRef):
        self.vol = vol
        self.name = name
        self.first_cluster = first_cluster
        self.size = size
        self.is_dir = is_dir
        self.ref = ref
        self.chain = vol.read_chain(first_cluster) if first_cluster else []
        self.dirty = False

    def flush(self):
        """Write size and first cluster back into the directory entry."""
        if not self.dirty or self.ref is None:
            return
        sector = bytearray(self.vol.io.bread(self.ref.lba))
        o = self.ref.offset
        struct.pack_into("<H", sector, o + 20, (self.first_cluster >> 16) & 0xFFFF)
        struct.pack_into("<H", sector, o + 26, self.first_cluster & 0xFFFF)
        struct.pack_into("<I", sector, o + 28, self.size)
        self.vol.io.bwrite(self.ref.lba, bytes(sector))
        self.dirty = False


def _short_name(raw11):
    base = raw11[:8].decode("ascii", "replace").rstrip()
    ext = raw11[8:11].decode("ascii", "replace").rstrip()
    return f"{base}.{ext}" if ext else base


def encode_83(name):
    """NAME.EXT -> 11-byte short entry; uppercased; rejects what can't fit."""
    name = name.upper()
    if "." in name:
        base, ext = name.rsplit(".", 1)
    else:
        base, ext = name, ""
    if not base or len(base) > 8 or len(ext) > 3:
        raise NameTooLong(f"{name!r} does not fit 8.3")
    for ch in base + ext:
        if ch in '"*+,/:;<=>?[\\]| ' or ord(ch) < 0x20:
            raise NameTooLong(f"invalid 8.3 character {ch!r}")
    return base.ljust(8).encode() + ext.ljust(3).encode()


class Volume:
    """A mounted FAT32 volume.

    use_bypass selects the file-content data path: ranged device access
    around the buffer cache (the optimized route) or sector-at-a-time
    cached access (the xv6-inherited route the optimization replaced).
    """

    def __init__(self, io, use_bypass=True):
        self.io = io
        self.use_bypass = use_bypass
        bpb = io.bread(0)
        if bpb[510:512] != b"\x55\xaa":
            raise BadSignature("missing 0x55AA boot signature")
        (self.bytes_per_sector,) = struct.unpack_from("<H", bpb, 11)
        self.sectors_per_cluster = bpb[13]
        (self.reserved_sectors,) = struct.unpack_from("<H", bpb, 14)
        self.nfats = bpb[16]
        (root_entries,) = struct.unpack_from("<H", bpb, 17)
        (total16,) = struct.unpack_from("<H", bpb, 19)
        (fatsz16,) = struct.unpack_from("<H", bpb, 22)
        (total32,) = struct.unpack_from("<I", bpb, 32)
        (self.fat_size,) = struct.unpack_from("<I", bpb, 36)
        (self.root_cluster,) = struct.unpack_from("<I", bpb, 44)
        if self.bytes_per_sector != SECTOR or self.sectors_per_cluster == 0:
            raise BadSignature("unsupported sector geometry")
        if root_entries != 0 or fatsz16 != 0:
            raise NotFat32("FAT12/16 layout fields present")
        self.total_sectors = total32 or total16
        self.fat_start = self.reserved_sectors
        self.data_start = self.fat_start + self.nfats * self.fat_size
        self.total_clusters = (
            (self.total_sectors - self.data_start) // self.sectors_per_cluster
        )
        if self.total_clusters < FAT32_MIN_CLUSTERS:
            raise NotFat32(f"{self.total_clusters} clusters is below the FAT32 line")
        self.cluster_bytes = self.sectors_per_cluster * SECTOR
        self._free_hint = 2
        # sanity walk: the root directory must parse
        self.read_chain(self.root_cluster)

    # -- FAT access ------------------------------------------------------------

    def fat_entry(self, cluster):
        lba = self.fat_start + (cluster * 4) // SECTOR
        off = (cluster * 4) % SECTOR
        (val,) = struct.unpack_from("<I", self.io.bread(lba), off)
        return val & FAT_MASK

    def set_fat_entry(self, cluster, value):
        # mirrored into every FAT copy
        for n in range(self.nfats):
            lba = self.fat_start + n * self.fat_size + (cluster * 4) // SECTOR
            off = (cluster * 4) % SECTOR
            sector = bytearray(self.io.bread(lba))
            (old,) = struct.unpack_from("<I", sector, off)
            struct.pack_into("<I", sector, off, (old & ~FAT_MASK) | (value & FAT_MASK))
            self.io.bwrite(lba, bytes(sector))

    def read_chain(self, first):
        """Follow a cluster chain; detects cycles and bad cluster numbers."""
        chain = []
        c = first
        limit = self.total_clusters + 2
        while c < EOC:
            if c < 2 or c >= self.total_clusters + 2:
                raise CorruptChain(f"cluster {c} out of range")
            chain.append(c)
            if len(chain) > limit:
                raise CorruptChain("cycle in cluster chain")
            c = self.fat_entry(c)
            if c == 0:
                raise CorruptChain("chain hits a free cluster")
        return chain

    def alloc_cluster(self, prev=0):
        """First-fit ascending scan (hint-started; nothing is ever freed,
        so the hint preserves first-fit order); links after prev."""
        n = self.total_clusters
        for i in range(n):
            c = 2 + (self._free_hint - 2 + i) % n
            if self.fat_entry(c) == 0:
                self.set_fat_entry(c, EOC)
                if prev:
                    self.set_fat_entry(prev, c)
                self._free_hint = c + 1
                return c
        raise DiskFull("no free clusters")

    def cluster_lba(self, cluster):
        return self.data_start + (cluster - 2) * self.sectors_per_cluster

    # -- directories -------------------------------------------------------------

    def _iter_dirents(self, dir_first_cluster):
        """Yield (raw 32B entry, DirentRef) for every slot, stopping at 0x00."""
        for cluster in self.read_chain(dir_first_cluster):
            base = self.cluster_lba(cluster)
            for s in range(self.sectors_per_cluster):
                sector = self.io.bread(base + s)
                for off in range(0, SECTOR, DIRENT_SIZE):
                    raw = sector[off : off + DIRENT_SIZE]
                    if raw[0] == 0x00:
                        return
                    yield raw, DirentRef(base + s, off)

    def readdir(self, pi: PseudoInode):
        """List (name, size, first_cluster, kind) in stable on-disk order."""
        if not pi.is_dir:
            raise NotADirectory(pi.name)
        out = []
        for raw, _ in self._iter_dirents(pi.first_cluster):
            if raw[0] == DEL_MARK:
                continue
            attr = raw[11]
            if attr & ATTR_LONG_NAME == ATTR_LONG_NAME or attr & ATTR_VOLUME_ID:
                continue
            name = _short_name(raw)
            if name in (".", ".."):
                continue
            (hi,) = struct.unpack_from("<H", raw, 20)
            (lo,) = struct.unpack_from("<H", raw, 26)
            (size,) = struct.unpack_from("<I", raw, 28)
            kind = "dir" if attr & ATTR_DIRECTORY else "file"
            out.append((name, size, (hi << 16) | lo, kind))
        return out

    def _find_entry(self, dir_first_cluster, name):
        want = name.upper()
        for raw, ref in self._iter_dirents(dir_first_cluster):
            if raw[0] == DEL_MARK:
                continue
            attr = raw[11]
            if attr & ATTR_LONG_NAME == ATTR_LONG_NAME or attr & ATTR_VOLUME_ID:
                continue
            if _short_name(raw).upper() == want:
                (hi,) = struct.unpack_from("<H", raw, 20)
                (lo,) = struct.unpack_from("<H", raw, 26)
                (size,) = struct.unpack_from("<I", raw, 28)
                return ((hi << 16) | lo, size, bool(attr & ATTR_DIRECTORY), ref)
        raise NotFound(name)

    def lookup(self, path):
        """Resolve a volume-relative path to a PseudoInode."""
        parts = [p for p in path.split("/") if p]
        cluster, size, is_dir, ref = self.root_cluster, 0, True, None
        name = "/"
        for comp in parts:
            if not is_dir:
                raise NotADirectory(name)
            cluster, size, is_dir, ref = self._find_entry(cluster, comp)
            name = comp
            if is_dir and cluster == 0:
                raise CorruptChain(f"{comp}: directory without a cluster")
        return PseudoInode(self, name, cluster, size, is_dir, ref)

    def create(self, dir_path, name, is_dir=False):
        """Add a fresh 8.3 entry in dir_path; returns its PseudoInode."""
        if is_dir:
            raise NotADirectory("directory creation is not supported")
        parent = self.lookup(dir_path)
        if not parent.is_dir:
            raise NotADirectory(dir_path)
        try:
            self._find_entry(parent.first_cluster, name)
            raise Exists(name)
        except NotFound:
            pass
        raw11 = encode_83(name)
        entry = bytearray(DIRENT_SIZE)
        entry[0:11] = raw11
        entry[11] = ATTR_ARCHIVE
        struct.pack_into("<H", entry, 14, _EPOCH_TIME)
        struct.pack_into("<H", entry, 16, _EPOCH_DATE)
        struct.pack_into("<H", entry, 18, _EPOCH_DATE)
        struct.pack_into("<H", entry, 22, _EPOCH_TIME)
        struct.pack_into("<H", entry, 24, _EPOCH_DATE)
        ref = self._alloc_dirent_slot(parent)
        sector = bytearray(self.io.bread(ref.lba))
        sector[ref.offset : ref.offset + DIRENT_SIZE] = entry
        self.io.bwrite(ref.lba, bytes(sector))
        return PseudoInode(self, name, 0, 0, False, ref)

    def _alloc_dirent_slot(self, parent: PseudoInode):
        last_ref = None
        for raw, ref in self._iter_dirents(parent.first_cluster):
            last_ref = ref
            if raw[0] == DEL_MARK:
                return ref
        # find the 0x00 terminator slot (or extend the directory)
        chain = self.read_chain(parent.first_cluster)
        base = self.cluster_lba(chain[-1])
        for s in range(self.sectors_per_cluster):
            sector = self.io.bread(base + s)
            for off in range(0, SECTOR, DIRENT_SIZE):
                if sector[off] == 0x00:
                    return DirentRef(base + s, off)
        new = self.alloc_cluster(prev=chain[-1])
        self._zero_cluster(new)
        return DirentRef(self.cluster_lba(new), 0)

    def _zero_cluster(self, cluster):
        self.io.write_range(self.cluster_lba(cluster), self.sectors_per_cluster,
                            b"\0" * self.cluster_bytes)

    # -- file contents -------------------------------------------------------------

    def _runs(self, clusters):
        """Coalesce an ordered cluster list into (first_lba, sector_count) runs."""
        runs = []
        for c in clusters:
            lba = self.cluster_lba(c)
            if runs and runs[-1][0] + runs[-1][1] == lba:
                runs[-1][1] += self.sectors_per_cluster
            else:
                runs.append([lba, self.sectors_per_cluster])
        return runs

    def read(self, pi: PseudoInode, off, n):
        """File-content read; walks the chain once, coalescing contiguous
        cluster runs into single ranged ops when the bypass is enabled."""
        if off >= pi.size:
            return b""
        n = min(n, pi.size - off)
        first_ci = off // self.cluster_bytes
        last_ci = (off + n - 1) // self.cluster_bytes
        if last_ci >= len(pi.chain):
            raise CorruptChain(f"{pi.name}: chain shorter than size")
        chunks = []
        for lba, count in self._runs(pi.chain[first_ci : last_ci + 1]):
            if self.use_bypass:
                chunks.append(self.io.read_range(lba, count))
            else:
                chunks.extend(self.io.bread(lba + s) for s in range(count))
        blob = b"".join(chunks)
        skip = off - first_ci * self.cluster_bytes
        return blob[skip : skip + n]

    def write(self, pi: PseudoInode, off, data):
        """Extend-or-overwrite write; allocates first-fit ascending clusters."""
        if off > pi.size:
            raise CorruptChain("write past end (no holes)")
        end = off + len(data)
        need = -(-end // self.cluster_bytes)
        prev = pi.chain[-1] if pi.chain else 0
        while len(pi.chain) < need:
            c = self.alloc_cluster(prev=prev)
            if not pi.chain:
                pi.first_cluster = c
            pi.chain.append(c)
            prev = c
        if not data:
            return 0
        first_ci = off // self.cluster_bytes
        last_ci = (end - 1) // self.cluster_bytes
        # read-modify-write at the ragged edges, ranged in the middle
        lead = off - first_ci * self.cluster_bytes
        tail_end = (last_ci + 1) * self.cluster_bytes
        if lead or end % self.cluster_bytes:
            span = bytearray(tail_end - first_ci * self.cluster_bytes)
            if pi.size > first_ci * self.cluster_bytes:
                have = self.read(pi, first_ci * self.cluster_bytes,
                                 min(pi.size, tail_end) - first_ci * self.cluster_bytes)
                span[: len(have)] = have
            span[lead : lead + len(data)] = data
            buf = span
        else:
            buf = bytearray(data)
        pos = 0
        for lba, count in self._runs(pi.chain[first_ci : last_ci + 1]):
            nbytes = count * SECTOR
            if self.use_bypass:
                self.io.write_range(lba, count, bytes(buf[pos : pos + nbytes]))
            else:
                for s in range(count):
                    self.io.bwrite(lba + s,
                                   bytes(buf[pos + s * SECTOR : pos + (s + 1) * SECTOR]))
            pos += nbytes
        if end > pi.size:
            pi.size = end
        pi.dirty = True
        return len(data)

    # -- integrity ---------------------------------------------------------------

    def fat_mirrors_equal(self):
        for s in range(self.fat_size):
            first = self.io.bread(self.fat_start + s)
            for n in range(1, self.nfats):
                if self.io.bread(self.fat_start + n * self.fat_size + s) != first:
                    return False
        return True


def mount(dev_or_io, use_bypass=True):
    """Mount a FAT32 volume from a device or a SectorIO-like adapter."""
    io = dev_or_io if hasattr(dev_or_io, "bread") else SectorIO(dev_or_io)
    return Volume(io, use_bypass=use_bypass)


def mkfat(size_bytes, volume_label=b"PROTO      "):
    """Build an empty, valid FAT32 volume image of the given size."""
    total_sectors = size_bytes // SECTOR
    reserved = 32
    nfats = 2
    spc = 1
    while total_sectors // spc > 4_000_000:  # keep FATs reasonable on big images
        spc *= 2
    fat_size = 0
    for _ in range(8):  # fixed-point for fat size
        clusters = (total_sectors - reserved - nfats * fat_size) // spc
        new = -(-(clusters + 2) * 4 // SECTOR)
        if new == fat_size:
            break
        fat_size = new
    clusters = (total_sectors - reserved - nfats * fat_size) // spc
    if clusters < FAT32_MIN_CLUSTERS:
        raise NotFat32(f"image too small for FAT32 ({clusters} clusters)")

    img = bytearray(total_sectors * SECTOR)
    bpb = bytearray(SECTOR)
    bpb[0:3] = b"\xeb\x58\x90"
    bpb[3:11] = b"PROTOSIM"
    struct.pack_into("<H", bpb, 11, SECTOR)
    bpb[13] = spc
    struct.pack_into("<H", bpb, 14, reserved)
    bpb[16] = nfats
    bpb[21] = 0xF8
    struct.pack_into("<H", bpb, 24, 32)    # sectors/track (geometry fiction)
    struct.pack_into("<H", bpb, 26, 64)    # heads
    struct.pack_into("<I", bpb, 32, total_sectors)
    struct.pack_into("<I", bpb, 36, fat_size)
    struct.pack_into("<I", bpb, 44, 2)     # root cluster
    struct.pack_into("<H", bpb, 48, 1)     # FSInfo sector
    struct.pack_into("<H", bpb, 50, 6)     # backup boot sector
    bpb[64] = 0x80
    bpb[66] = 0x29
    struct.pack_into("<I", bpb, 67, 0x50524F54)  # volume id, fixed
    bpb[71:82] = volume_label
    bpb[82:90] = b"FAT32   "
    bpb[510:512] = b"\x55\xaa"
    img[0:SECTOR] = bpb
    img[6 * SECTOR : 7 * SECTOR] = bpb

    fsinfo = bytearray(SECTOR)
    struct.pack_into("<I", fsinfo, 0, 0x41615252)
    struct.pack_into("<I", fsinfo, 484, 0x61417272)
    struct.pack_into("<I", fsinfo, 488, 0xFFFFFFFF)  # free count unknown
    struct.pack_into("<I", fsinfo, 492, 0xFFFFFFFF)
    struct.pack_into("<I", fsinfo, 508, 0xAA550000)
    img[SECTOR : 2 * SECTOR] = fsinfo
    img[7 * SECTOR : 8 * SECTOR] = fsinfo

    for n in range(nfats):
        base = (reserved + n * fat_size) * SECTOR
        struct.pack_into("<I", img, base, 0x0FFFFFF8)       # media in FAT[0]
        struct.pack_into("<I", img, base + 4, 0x0FFFFFFF)   # FAT[1]
        struct.pack_into("<I", img, base + 8, EOC)          # root dir cluster
    return bytes(img)
