"""The operator shell around the kernel: a newline-delimited text protocol
on stdin/stdout and an optional local socket, plus the image tools.

One command per line, one reply per command, in order. Replies are either
a single line ("ok ...", "err <code> <msg>") or a counted block:
"ok <n>" followed by exactly n payload lines (tracedump, ps, panic).

The socket listener accepts both raw TCP lines and WebSocket clients (the
browser console); every client's commands funnel into one serial queue,
so the protocol remains the only doorway and stays deterministic.
"""

import argparse
import base64
import hashlib
import os
import queue
import re
import socket
import struct
import sys
import threading
import time

from . import userland, xv6fs
from .errors import SimError
from .fatfs import mkfat
from .kernel import Kernel

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ProtocolDone(Exception):
    """Raised by `shutdown` to end the session loop."""


class Session:
    """Parses protocol lines and drives one kernel instance."""

    def __init__(self, base_dir="."):
        self.kernel = None
        self.base_dir = base_dir

    # -- helpers ---------------------------------------------------------------

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def _need_kernel(self):
        if self.kernel is None:
            raise SessionError("NotBooted", "boot first")

    def handle(self, line):
        """One command in, one reply out (possibly a counted block)."""
        parts = line.strip().split()
        if not parts:
            return "ok"
        verb, args = parts[0], parts[1:]
        method = getattr(self, "cmd_" + verb, None)
        if method is None:
            return f"err BadCommand unknown verb {verb}"
        try:
            return method(args)
        except SessionError as e:
            return f"err {e.code} {e.msg}"
        except SimError as e:
            return f"err {type(e).__name__} {e}"
        except ProtocolDone:
            raise
        except Exception as e:  # surface bugs to the operator, keep serving
            return f"err Internal {type(e).__name__}: {e}"

    @staticmethod
    def _block(lines):
        lines = [l for l in lines if l != ""]
        return "\n".join([f"ok {len(lines)}"] + lines)

    # -- commands -----------------------------------------------------------------

    def cmd_boot(self, args):
        if not args:
            raise SessionError("BadArgs", "boot <profile> [key=value...]")
        profile = args[0]
        opts = dict(a.split("=", 1) for a in args[1:] if "=" in a)
        seed = int(opts.get("seed", os.environ.get("PROTOSIM_SEED", "0")))
        cores = int(opts["cores"]) if "cores" in opts else None
        ramdisk = fat = None
        ramdisk_path = fat_path = None
        if "ramdisk" in opts:
            ramdisk_path = self._path(opts["ramdisk"])
            try:
                with open(ramdisk_path, "rb") as f:
                    ramdisk = f.read()
            except OSError as e:
                raise SessionError("BadImage", f"ramdisk: {e}")
        if "fat" in opts:
            fat_path = self._path(opts["fat"])
            try:
                with open(fat_path, "rb") as f:
                    fat = f.read()
            except OSError as e:
                raise SessionError("BadImage", f"fat: {e}")
        try:
            self.kernel = Kernel(profile=profile, seed=seed, ramdisk=ramdisk,
                                 fat=fat, ncores=cores,
                                 ramdisk_path=ramdisk_path, fat_path=fat_path,
                                 fat_bypass=opts.get("fatbypass", "1") != "0")
        except KeyError:
            raise SessionError("BadProfile", profile)
        return f"ok booted {profile} cores={self.kernel.profile.ncores} seed={seed}"

    def cmd_step(self, args):
        self._need_kernel()
        ticks = int(args[0]) if args else 0
        now = self.kernel.step(ticks) if ticks > 0 else self.kernel.hw.clock.now
        return f"ok now={now}"

    def cmd_key(self, args):
        self._need_kernel()
        if len(args) < 2:
            raise SessionError("BadArgs", "key <scancode> <press|release> [mods]")
        scancode = int(args[0])
        action = args[1]
        mods = [] if len(args) < 3 or args[2] == "-" else args[2].split(",")
        self.kernel.inject_key(scancode, action, mods)
        return "ok"

    def cmd_text(self, args):
        """Convenience: inject press/release pairs for a whole string.
        Spaces are given as '_', newline as '\\n'."""
        self._need_kernel()
        text = " ".join(args).replace("_", " ").replace("\\n", "\n")
        from .devio import scancode_for_char
        for ch in text:
            code, shift = scancode_for_char(ch)
            mods = ["shift"] if shift else []
            self.kernel.inject_key(code, "press", mods)
            self.kernel.inject_key(code, "release", mods)
        return f"ok injected {2 * len(text)}"

    def cmd_screenshot(self, args):
        self._need_kernel()
        if not args:
            raise SessionError("BadArgs", "screenshot <path>")
        path = self._path(args[0])
        self.kernel.screenshot(path)
        return f"ok {args[0]}"

    def cmd_tracedump(self, args):
        self._need_kernel()
        n = int(args[0]) if args else 64
        text = self.kernel.tracedump(n)
        return self._block(text.splitlines())

    def cmd_ps(self, args):
        self._need_kernel()
        return self._block(self.kernel.ps_text().splitlines())

    def cmd_panic(self, args):
        self._need_kernel()
        return self._block(self.kernel.panic().splitlines())

    def cmd_spawn(self, args):
        self._need_kernel()
        if not args:
            raise SessionError("BadArgs", "spawn <program> [args...]")
        try:
            tid = self.kernel.spawn(args[0], args[1:])
        except SimError as e:
            raise SessionError(type(e).__name__, str(e))
        return f"ok tid={tid}"

    def cmd_geometry(self, args):
        self._need_kernel()
        fb = self.kernel.hw.fb
        # key=value form: a bare leading number would collide with the
        # counted-block reply framing
        return f"ok w={fb.width} h={fb.height} stride={fb.stride} format=rgba8888"

    def cmd_frame(self, args):
        """The visible framebuffer as one base64 PPM line (browser poll)."""
        self._need_kernel()
        blob = self.kernel.hw.fb.ppm_bytes()
        return "ok " + base64.b64encode(blob).decode()

    def cmd_shutdown(self, args):
        if self.kernel is not None:
            self.kernel.shutdown()
        raise ProtocolDone()


class SessionError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code
        self.msg = msg


def run_script(session, lines, out):
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            reply = session.handle(line)
        except ProtocolDone:
            out.write("ok\n")
            return False
        out.write(reply + "\n")
        out.flush()
    return True


# -- socket serving (raw TCP lines + WebSocket) -----------------------------------


class RawClient:
    def __init__(self, sock, first=b""):
        self.sock = sock
        self.buf = bytearray(first)

    def recv_line(self):
        while b"\n" not in self.buf:
            data = self.sock.recv(4096)
            if not data:
                return None
            self.buf += data
        line, _, rest = bytes(self.buf).partition(b"\n")
        self.buf = bytearray(rest)
        return line.decode("utf-8", "replace")

    def send_reply(self, text):
        self.sock.sendall(text.encode() + b"\n")


def _ws_handshake(sock, preread):
    data = bytearray(preread)
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            return None
        data += chunk
    head, _, rest = bytes(data).partition(b"\r\n\r\n")
    m = re.search(rb"Sec-WebSocket-Key: *([^\r\n]+)", head, re.IGNORECASE)
    if not m:
        return None
    accept = base64.b64encode(
        hashlib.sha1(m.group(1).strip() + WS_GUID.encode()).digest())
    sock.sendall(b"HTTP/1.1 101 Switching Protocols\r\n"
                 b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                 b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n")
    return bytearray(rest)


class WebSocketClient:
    def __init__(self, sock, leftover):
        self.sock = sock
        self.buf = leftover

    def _need(self, n):
        while len(self.buf) < n:
            chunk = self.sock.recv(4096)
            if not chunk:
                return False
            self.buf += chunk
        return True

    def recv_line(self):
        while True:
            if not self._need(2):
                return None
            b1, b2 = self.buf[0], self.buf[1]
            opcode = b1 & 0x0F
            masked = b2 & 0x80
            length = b2 & 0x7F
            off = 2
            if length == 126:
                if not self._need(4):
                    return None
                length = struct.unpack_from(">H", self.buf, 2)[0]
                off = 4
            elif length == 127:
                if not self._need(10):
                    return None
                length = struct.unpack_from(">Q", self.buf, 2)[0]
                off = 10
            mask = b""
            if masked:
                if not self._need(off + 4):
                    return None
                mask = bytes(self.buf[off : off + 4])
                off += 4
            if not self._need(off + length):
                return None
            payload = bytes(self.buf[off : off + length])
            del self.buf[: off + length]
            if mask:
                payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
            if opcode == 8:       # close
                return None
            if opcode == 9:       # ping -> pong
                self._send_frame(0x8A, payload)
                continue
            if opcode in (1, 2):
                return payload.decode("utf-8", "replace").strip("\n")

    def _send_frame(self, first_byte, payload):
        header = bytes([first_byte])
        n = len(payload)
        if n < 126:
            header += bytes([n])
        elif n < 65536:
            header += bytes([126]) + struct.pack(">H", n)
        else:
            header += bytes([127]) + struct.pack(">Q", n)
        self.sock.sendall(header + payload)

    def send_reply(self, text):
        self._send_frame(0x81, text.encode())


def serve(session, port, out, realtime=0.0):
    """Accept raw-TCP and WebSocket clients; commands run strictly serially."""
    cmdq = queue.Queue()

    def client_loop(sock):
        try:
            first = sock.recv(4, socket.MSG_PEEK)
            if first.startswith(b"GET"):
                leftover = _ws_handshake(sock, b"")
                if leftover is None:
                    sock.close()
                    return
                client = WebSocketClient(sock, leftover)
            else:
                client = RawClient(sock)
            while True:
                line = client.recv_line()
                if line is None:
                    break
                done = threading.Event()
                cmdq.put((client, line, done))
                done.wait()
        except OSError:
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def acceptor(server):
        while True:
            try:
                sock, _ = server.accept()
            except OSError:
                return
            threading.Thread(target=client_loop, args=(sock,), daemon=True).start()

    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(("127.0.0.1", port))
    server.listen(8)
    out.write(f"listening on 127.0.0.1:{server.getsockname()[1]}\n")
    out.flush()
    threading.Thread(target=acceptor, args=(server,), daemon=True).start()

    last = time.monotonic()
    while True:
        try:
            client, line, done = cmdq.get(timeout=0.05)
        except queue.Empty:
            if realtime > 0 and session.kernel is not None:
                now = time.monotonic()
                ticks = int((now - last) * realtime * 1_000_000)
                if ticks > 0:
                    session.kernel.step(min(ticks, 1_000_000))
                last = now
            continue
        try:
            reply = session.handle(line)
        except ProtocolDone:
            try:
                client.send_reply("ok")
            except OSError:
                pass
            done.set()
            server.close()
            return
        try:
            client.send_reply(reply)
        except OSError:
            pass
        last = time.monotonic()
        done.set()


def main(argv=None):
    p = argparse.ArgumentParser(prog="protosim",
                                description="deterministic instructional-OS simulator")
    p.add_argument("command", nargs="?", choices=["boot"], default="boot")
    p.add_argument("--profile", default=None, help="p1..p5")
    p.add_argument("--ramdisk", default=None)
    p.add_argument("--fat", default=None)
    p.add_argument("--seed", type=int,
                   default=int(os.environ.get("PROTOSIM_SEED", "0")))
    p.add_argument("--cores", type=int, default=None)
    p.add_argument("--listen", type=int, default=None, metavar="PORT")
    p.add_argument("--script", default=None, metavar="FILE")
    p.add_argument("--realtime", type=float, default=0.0, metavar="RATIO",
                   help="map host seconds to simulated seconds while idle")
    args = p.parse_args(argv)

    session = Session()
    out = sys.stdout
    if args.profile:
        boot = [args.profile, f"seed={args.seed}"]
        if args.ramdisk:
            boot.append(f"ramdisk={args.ramdisk}")
        if args.fat:
            boot.append(f"fat={args.fat}")
        if args.cores:
            boot.append(f"cores={args.cores}")
        reply = session.handle("boot " + " ".join(boot))
        out.write(reply + "\n")
        out.flush()
        if reply.startswith("err"):
            return 1
    if args.script:
        with open(args.script) as f:
            if not run_script(session, f.readlines(), out):
                return 0
    if args.listen is not None:
        serve(session, args.listen, out, realtime=args.realtime)
        return 0
    if args.script and args.listen is None:
        return 0
    try:
        run_script(session, sys.stdin, out)
    except KeyboardInterrupt:
        pass
    return 0


def _parse_size(text):
    m = re.fullmatch(r"(\d+)([kKmMgG]?)", text)
    if not m:
        raise ValueError(f"bad size {text!r}")
    mult = {"": 1, "k": 1024, "m": 1024 ** 2, "g": 1024 ** 3}[m.group(2).lower()]
    return int(m.group(1)) * mult


def mkfs_main(argv=None):
    p = argparse.ArgumentParser(prog="protosim-mkfs",
                                description="build a root ramdisk image")
    p.add_argument("output")
    p.add_argument("--dir", default=None,
                   help="directory of extra files to pack under /")
    p.add_argument("--no-apps", action="store_true",
                   help="omit the built-in program images")
    p.add_argument("--size-blocks", type=int, default=2048)
    args = p.parse_args(argv)

    extra = []
    if args.dir:
        for root, _dirs, files in sorted(os.walk(args.dir)):
            for name in sorted(files):
                full = os.path.join(root, name)
                rel = os.path.relpath(full, args.dir).replace(os.sep, "/")
                with open(full, "rb") as f:
                    extra.append(("/" + rel, f.read()))
    manifest = extra if args.no_apps else userland.ramdisk_manifest(extra)
    image = xv6fs.mkfs(manifest, size_blocks=args.size_blocks)
    with open(args.output, "wb") as f:
        f.write(image)
    print(f"wrote {args.output}: {len(image)} bytes, {len(manifest)} files")
    return 0


def mkfat_main(argv=None):
    p = argparse.ArgumentParser(prog="protosim-mkfat",
                                description="build an empty FAT32 volume image")
    p.add_argument("output")
    p.add_argument("--size", default="64M")
    args = p.parse_args(argv)
    image = mkfat(_parse_size(args.size))
    with open(args.output, "wb") as f:
        f.write(image)
    print(f"wrote {args.output}: {len(image)} bytes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
