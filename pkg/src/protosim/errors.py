"""Error codes shared between kernel subsystems and the syscall ABI.

Syscalls report failure as negative integers (-code). Kernel-internal
paths raise SimError subclasses carrying the same code so handlers can
translate uniformly.
"""

from enum import IntEnum


class Err(IntEnum):
    NOT_FOUND = 2
    IO = 5
    BAD_IMAGE = 8
    BAD_FD = 9
    NO_CHILDREN = 10
    WOULD_BLOCK = 11
    NO_MEM = 12
    BAD_ADDRESS = 14
    BUSY = 16
    EXISTS = 17
    NOT_A_DIR = 20
    INVALID = 22
    TOO_MANY_FILES = 24
    FILE_TOO_LARGE = 27
    DISK_FULL = 28
    ILLEGAL_SEEK = 29
    READ_ONLY_FS = 30
    BROKEN_PIPE = 32
    OUT_OF_RANGE = 34
    NAME_TOO_LONG = 36
    NO_SYS = 38
    TASKS_EXHAUSTED = 39
    QUEUE_FULL = 40
    PROTOCOL = 71
    UNSUPPORTED = 95


class SimError(Exception):
    """Base for kernel-internal errors that map onto a syscall code."""

    code = Err.INVALID

    def __init__(self, msg=""):
        super().__init__(msg or self.__class__.__name__)


class OutOfRange(SimError):
    code = Err.OUT_OF_RANGE


class QueueFull(SimError):
    code = Err.QUEUE_FULL


class IoError(SimError):
    code = Err.IO


class NotFound(SimError):
    code = Err.NOT_FOUND


class NotADirectory(SimError):
    code = Err.NOT_A_DIR


class Exists(SimError):
    code = Err.EXISTS


class NameTooLong(SimError):
    code = Err.NAME_TOO_LONG


class BadImage(SimError):
    code = Err.BAD_IMAGE


class OutOfMemory(SimError):
    code = Err.NO_MEM


class DiskFull(SimError):
    code = Err.DISK_FULL


class ImageFull(SimError):
    code = Err.DISK_FULL


class FileTooLarge(SimError):
    code = Err.FILE_TOO_LARGE


class ReadOnlyFs(SimError):
    code = Err.READ_ONLY_FS


class BrokenPipe(SimError):
    code = Err.BROKEN_PIPE


class IllegalSeek(SimError):
    code = Err.ILLEGAL_SEEK


class WouldBlock(SimError):
    code = Err.WOULD_BLOCK


class ProtocolError(SimError):
    code = Err.PROTOCOL


class CorruptChain(SimError):
    code = Err.IO


class BadSignature(SimError):
    code = Err.BAD_IMAGE


class NotFat32(SimError):
    code = Err.BAD_IMAGE


class Unsupported(SimError):
    code = Err.UNSUPPORTED


class UnderflowPanic(RuntimeError):
    """pop_off with interrupt depth already at zero: a kernel bug, not a guest error."""
