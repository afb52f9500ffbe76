"""Frame transports: TCP streams and an offline directory of frame files.

Offline layout (one directory per session)::

    <root>/session-<id>/client.open        created by the client
    <root>/session-<id>/server.claimed     created by the serving process
    <root>/session-<id>/c2s/000001-HELLO.frame
    <root>/session-<id>/s2c/000001-RESPONSE.frame
    <root>/session-<id>/client.closed      end of stream markers
    <root>/session-<id>/server.closed

Frame files are written under a temporary name and renamed into place, so a
reader never sees a partial frame.
"""

from __future__ import annotations

import os
import socket
import time
import uuid
from pathlib import Path

from ..errors import FrameError, ProtocolError
from .frames import Frame, Tag, decode_frame, read_frame


class SocketConnection:
    def __init__(self, sock: socket.socket, max_frame: int | None = None):
        self.sock = sock
        self.max_frame = max_frame
        self._rfile = sock.makefile("rb")
        self.bytes_in = 0
        self.bytes_out = 0

    def _read_exact(self, n: int) -> bytes:
        data = self._rfile.read(n)
        self.bytes_in += len(data)
        return data

    def send(self, frame: Frame):
        raw = frame.encode()
        self.sock.sendall(raw)
        self.bytes_out += len(raw)

    def recv(self) -> Frame | None:
        return read_frame(self._read_exact, self.max_frame)

    def interrupt(self):
        """Make a blocked or future recv() return end-of-stream; sending still works."""
        try:
            self.sock.shutdown(socket.SHUT_RD)
        except OSError:
            pass

    def close(self):
        try:
            self._rfile.close()
            self.sock.close()
        except OSError:
            pass


def connect_tcp(address: str, timeout: float | None = 600.0, max_frame: int | None = None):
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"address must be host:port, got {address!r}")
    try:
        sock = socket.create_connection((host, int(port)), timeout=timeout)
    except OSError as exc:
        raise ConnectionError(f"cannot reach {address}: {exc}") from exc
    return SocketConnection(sock, max_frame)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, max_frame: int | None = None):
        self.sock = socket.create_server((host, port), reuse_port=False)
        self.sock.settimeout(0.2)
        self.max_frame = max_frame

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self):
        """A connection, or None when nothing arrived within the poll interval."""
        try:
            sock, _ = self.sock.accept()
        except socket.timeout:
            return None
        sock.settimeout(None)
        return SocketConnection(sock, self.max_frame)

    def close(self):
        self.sock.close()


class FileConnection:
    """One side of an offline session directory."""

    def __init__(self, session_dir, role: str, timeout: float = 600.0, poll: float = 0.005,
                 max_frame: int | None = None):
        if role not in ("client", "server"):
            raise ValueError("role must be 'client' or 'server'")
        self.dir = Path(session_dir)
        self.role = role
        self.peer = "server" if role == "client" else "client"
        self.out_dir = self.dir / ("c2s" if role == "client" else "s2c")
        self.in_dir = self.dir / ("s2c" if role == "client" else "c2s")
        self.timeout = timeout
        self.poll = poll
        self.max_frame = max_frame
        self._sent = 0
        self._received = 0
        self._interrupted = False
        self.bytes_in = 0
        self.bytes_out = 0

    def send(self, frame: Frame):
        self._sent += 1
        name = f"{self._sent:06d}-{frame.tag.name}.frame"
        tmp = self.out_dir / (name + ".tmp")
        raw = frame.encode()
        with open(tmp, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, self.out_dir / name)
        self.bytes_out += len(raw)

    def _next_path(self):
        prefix = f"{self._received + 1:06d}-"
        for tag in Tag:
            p = self.in_dir / f"{prefix}{tag.name}.frame"
            if p.exists():
                return p
        return None

    def recv(self) -> Frame | None:
        deadline = time.monotonic() + self.timeout
        while True:
            if self._interrupted:
                return None
            path = self._next_path()
            if path is None and (self.dir / f"{self.peer}.closed").exists():
                path = self._next_path()
                if path is None:
                    return None
            if path is not None:
                raw = path.read_bytes()
                self._received += 1
                self.bytes_in += len(raw)
                return decode_frame(raw, self.max_frame)
            if time.monotonic() > deadline:
                raise ConnectionError(f"timed out waiting for a frame in {self.in_dir}")
            time.sleep(self.poll)

    def interrupt(self):
        self._interrupted = True

    def close(self):
        (self.dir / f"{self.role}.closed").touch()


def open_offline_session(root, timeout: float = 600.0) -> FileConnection:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    d = root / f"session-{time.strftime('%Y%m%d%H%M%S')}-{uuid.uuid4().hex[:8]}"
    (d / "c2s").mkdir(parents=True)
    (d / "s2c").mkdir()
    (d / "client.open").touch()
    return FileConnection(d, "client", timeout)


class OfflineListener:
    """Claims new session directories under ``root``."""

    def __init__(self, root, poll: float = 0.05, timeout: float = 600.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.poll = poll
        self.timeout = timeout

    def accept(self):
        for d in sorted(self.root.glob("session-*")):
            if not (d / "client.open").exists():
                continue
            try:
                fd = os.open(d / "server.claimed", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                continue
            os.close(fd)
            return FileConnection(d, "server", self.timeout)
        time.sleep(self.poll)
        return None

    def close(self):
        pass


def count_frames(session_dir, tag: Tag, direction: str = "c2s") -> int:
    return len(list((Path(session_dir) / direction).glob(f"*-{tag.name}.frame")))


__all__ = ["SocketConnection", "TcpListener", "FileConnection", "OfflineListener", "connect_tcp",
           "open_offline_session", "count_frames", "FrameError"]
