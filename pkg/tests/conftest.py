import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protosim import fatfs, userland, xv6fs
from protosim.devio import scancode_for_char
from protosim.kernel import Kernel


@pytest.fixture(scope="session")
def ramdisk():
    return xv6fs.mkfs(userland.ramdisk_manifest())


@pytest.fixture(scope="session")
def fat_image():
    return fatfs.mkfat(64 * 1024 * 1024)


@pytest.fixture
def boot_p4(ramdisk):
    def make(seed=1, **kw):
        return Kernel(profile="p4", seed=seed, ramdisk=ramdisk, **kw)
    return make


@pytest.fixture
def boot_p5(ramdisk, fat_image):
    def make(seed=1, ncores=None, fat=True, **kw):
        return Kernel(profile="p5", seed=seed, ramdisk=ramdisk,
                      fat=fat_image if fat else None, ncores=ncores, **kw)
    return make


def type_text(kernel, text):
    """Inject press/release pairs spelling out text."""
    for ch in text:
        code, shift = scancode_for_char(ch)
        mods = ["shift"] if shift else []
        kernel.inject_key(code, "press", mods)
        kernel.inject_key(code, "release", mods)


def uart_text(kernel):
    return bytes(kernel.hw.uart_log).decode("utf-8", "replace")


def run_shell_command(kernel, command, ticks=3_000_000):
    """Type a command at the shell prompt and let it run."""
    type_text(kernel, command + "\n")
    kernel.step(ticks)
    return uart_text(kernel)
