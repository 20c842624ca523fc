"""PIMG: the segment-based program-image container loaded by exec().

Byte layout, little-endian:

    offset  size  field
    0       4     magic "PIMG"
    4       2     version (currently 1)
    6       2     segment count
    8       2     registry key length K
    10      K     registry key (utf-8): names the program behavior
    10+K    2     minimum argv arity
    12+K    16*n  segment table: va u64, size u32, perms u8, pad[3]
    ...           segment payloads, in table order

Segments must start page-aligned, must not overlap, and at least one must
be executable.
"""

import struct
from dataclasses import dataclass

from .errors import BadImage
from .mem import PAGE_SIZE, PERM_R, PERM_W, PERM_X

MAGIC = b"PIMG"
VERSION = 1
_SEG = struct.Struct("<QIB3x")
_HEAD = struct.Struct("<4sHHH")


@dataclass(frozen=True)
class Segment:
    va: int
    data: bytes
    perms: int


@dataclass(frozen=True)
class ProgramImage:
    name: str
    registry_key: str
    min_argv: int
    segments: tuple

    def code_bounds(self):
        lo = min(s.va for s in self.segments)
        hi = max(s.va + len(s.data) for s in self.segments)
        return lo, hi


def build(registry_key, segments, min_argv=0):
    """Serialize a program image. segments: iterable of (va, bytes, perms)."""
    key = registry_key.encode()
    out = bytearray(_HEAD.pack(MAGIC, VERSION, len(segments), len(key)))
    out += key
    out += struct.pack("<H", min_argv)
    for va, data, perms in segments:
        out += _SEG.pack(va, len(data), perms)
    for _, data, _ in segments:
        out += data
    return bytes(out)


def parse(name, blob):
    """Parse and validate a PIMG blob; raises BadImage on any violation."""
    if len(blob) < _HEAD.size:
        raise BadImage("image too short")
    magic, version, nsegs, keylen = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadImage("bad magic")
    if version != VERSION:
        raise BadImage(f"unsupported version {version}")
    off = _HEAD.size
    key = blob[off : off + keylen].decode("utf-8", "replace")
    off += keylen
    if off + 2 > len(blob):
        raise BadImage("truncated header")
    (min_argv,) = struct.unpack_from("<H", blob, off)
    off += 2
    table = []
    for _ in range(nsegs):
        if off + _SEG.size > len(blob):
            raise BadImage("truncated segment table")
        va, size, perms = _SEG.unpack_from(blob, off)
        off += _SEG.size
        table.append((va, size, perms))
    segments = []
    for va, size, perms in table:
        if va % PAGE_SIZE:
            raise BadImage(f"segment va 0x{va:x} not page aligned")
        if off + size > len(blob):
            raise BadImage("truncated segment data")
        segments.append(Segment(va, bytes(blob[off : off + size]), perms))
        off += size
    if not segments:
        raise BadImage("no segments")
    spans = sorted((s.va, s.va + max(len(s.data), 1)) for s in segments)
    for (alo, ahi), (blo, _) in zip(spans, spans[1:]):
        if blo < ahi:
            raise BadImage("overlapping segments")
    if not any(s.perms & PERM_X for s in segments):
        raise BadImage("no executable segment")
    return ProgramImage(name, key, min_argv, tuple(segments))


def default_app_image(registry_key, min_argv=0, payload=b""):
    """One-line builder for shipped apps: a code page plus optional data page.

    The code payload is a deterministic filler derived from the key; guest
    behavior itself is host code resolved through the registry.
    """
    code = (registry_key.encode() + b"\x90") * (PAGE_SIZE // (len(registry_key) + 1))
    code = code[:PAGE_SIZE]
    segs = [(0x1000, code, PERM_R | PERM_X)]
    if payload:
        segs.append((0x3000, payload, PERM_R | PERM_W))
    return build(registry_key, segs, min_argv=min_argv)
