"""Reliable ordered byte transports: an in-process loopback pair for replay
and tests, and a thin non-blocking TCP wrapper for live sessions."""

import socket
from typing import Optional


class TransportClosed(ConnectionError):
    pass


class LoopbackTransport:
    """One half of an in-memory duplex pipe. Writes land in the peer's inbox
    immediately; recv drains whatever has arrived."""

    def __init__(self):
        self._inbox = bytearray()
        self._peer: Optional["LoopbackTransport"] = None
        self.closed = False
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def pair(cls) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        a, b = cls(), cls()
        a._peer, b._peer = b, a
        return a, b

    def send(self, data: bytes) -> None:
        if self.closed or self._peer is None or self._peer.closed:
            raise TransportClosed("loopback peer is closed")
        self._peer._inbox += data
        self.bytes_sent += len(data)

    def recv(self) -> bytes:
        data = bytes(self._inbox)
        self._inbox.clear()
        self.bytes_received += len(data)
        if not data and self.closed:
            raise TransportClosed("loopback closed")
        return data

    def close(self) -> None:
        self.closed = True


class TcpTransport:
    """Connected TCP socket with non-blocking reads; send stays blocking so
    the server loop applies natural backpressure."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setblocking(False)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.closed = False
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "TcpTransport":
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock)

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportClosed("socket closed")
        try:
            self._sock.setblocking(True)
            self._sock.sendall(data)
        except OSError as e:
            self.close()
            raise TransportClosed(str(e)) from e
        finally:
            if not self.closed:
                self._sock.setblocking(False)
        self.bytes_sent += len(data)

    def recv(self) -> bytes:
        if self.closed:
            raise TransportClosed("socket closed")
        chunks = []
        while True:
            try:
                chunk = self._sock.recv(1 << 16)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as e:
                self.close()
                raise TransportClosed(str(e)) from e
            if chunk == b"":  # orderly shutdown from the peer
                self.close()
                if not chunks:
                    raise TransportClosed("peer closed connection")
                break
            chunks.append(chunk)
        data = b"".join(chunks)
        self.bytes_received += len(data)
        return data

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self._sock.close()
            except OSError:
                pass


class TcpListener:
    def __init__(self, host: str, port: int):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self.address = self._sock.getsockname()

    def accept(self, timeout: Optional[float] = None) -> TcpTransport:
        self._sock.settimeout(timeout)
        conn, _ = self._sock.accept()
        return TcpTransport(conn)

    def close(self) -> None:
        self._sock.close()
