"""Newline-delimited JSON target protocol.

Requests are one object per line with an ``op`` field; responses are
``{"ok": true, ...}`` or ``{"ok": false, "error": ...}``. An unresponsive
(hard-crashed) board answers ``{"ok": false, "error": "timeout"}``.

Each connection gets its own simulated board, so several workers can share a
server without interleaving their restore/program/read sequences.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver

from .bitstream import hex_to_words, words_to_hex
from .device import DeviceConfig
from .engine import Unresponsive
from .harness import SimTarget, TransportError, common_prefix

log = logging.getLogger(__name__)

OPS = ("program", "read_regs", "reset", "power_cycle", "done", "restore")


class _Session:
    def __init__(self, device: DeviceConfig):
        self.target = SimTarget(device)
        self.last: list[int] = []

    def handle(self, req: dict) -> dict:
        op = req.get("op")
        t = self.target
        if op == "program":
            prefix = int(req.get("prefix", 0))
            if not 0 <= prefix <= len(self.last):
                raise ValueError(f"prefix {prefix} longer than previous image")
            words = self.last[:prefix] + hex_to_words(req.get("hex", ""))
            self.last = words
            return {"ok": True, "output": words_to_hex(t.program(words))}
        if op == "read_regs":
            dump, soft = t.read_regs()
            return {"ok": True, "regs": [f"{v:08x}" for v in dump], "soft_crashed": soft}
        if op == "reset":
            t.reset()
        elif op == "power_cycle":
            t.power_cycle()
        elif op == "restore":
            t.restore()
        elif op == "done":
            return {"ok": True, "done": t.done()}
        else:
            raise ValueError(f"unknown op {op!r}")
        return {"ok": True}


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self):
        session = _Session(self.server.device)
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                resp = session.handle(json.loads(line))
            except Unresponsive:
                resp = {"ok": False, "error": "timeout"}
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                resp = {"ok": False, "error": "bad_request", "detail": str(exc)}
            self.wfile.write((json.dumps(resp) + "\n").encode())


class TargetServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, device: DeviceConfig, host: str = "127.0.0.1", port: int = 0):
        self.device = device
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class TcpTarget:
    """Client side of the protocol, same interface as SimTarget."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach {host}:{port}: {exc}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self.sock.makefile("rb")
        self._last: list[int] | None = None
        self.model = None

    def _call(self, req: dict) -> dict:
        try:
            self.sock.sendall((json.dumps(req) + "\n").encode())
            line = self._rfile.readline()
        except OSError as exc:
            raise TransportError(f"transport failure: {exc}") from None
        if not line:
            raise TransportError("connection closed by target")
        resp = json.loads(line)
        if not resp.get("ok"):
            if resp.get("error") == "timeout":
                raise Unresponsive("target timed out")
            raise TransportError(f"target rejected request: {resp}")
        return resp

    def restore(self) -> None:
        self._call({"op": "restore"})

    def program(self, words) -> list[int]:
        words = list(words)
        prefix = common_prefix(self._last, words) if self._last is not None else 0
        self._last = words
        resp = self._call({"op": "program", "prefix": prefix, "hex": words_to_hex(words[prefix:])})
        return hex_to_words(resp.get("output", ""))

    def read_regs(self) -> tuple[list[int], bool]:
        resp = self._call({"op": "read_regs"})
        return [int(v, 16) for v in resp["regs"]], bool(resp.get("soft_crashed", False))

    def reset(self) -> None:
        self._call({"op": "reset"})

    def power_cycle(self) -> None:
        self._call({"op": "power_cycle"})

    def done(self) -> bool:
        return bool(self._call({"op": "done"})["done"])

    def close(self) -> None:
        try:
            self._rfile.close()
            self.sock.close()
        except OSError:
            pass
