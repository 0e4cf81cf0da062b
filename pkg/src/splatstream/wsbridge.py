"""WebSocket bridge for browser viewers.

Listens on one HTTP port. Requests carrying an ``Upgrade: websocket`` header
are upgraded (RFC 6455) and proxied to the upstream stream server: every wire
frame arriving over TCP is forwarded as exactly one binary WebSocket message,
and binary messages from the browser (pose packets) are written upstream
verbatim. All other requests are served from a static asset directory so the
bundled web viewer can be hosted without a separate file server.
"""

import base64
import hashlib
import logging
import mimetypes
import os
import select
import socket
import struct
import threading
from typing import Optional

from .protocol.framing import FrameParser, ProtocolError, frame_bytes

log = logging.getLogger(__name__)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_MAX_REQUEST = 64 * 1024
_MAX_WS_MESSAGE = 64 * 1024 * 1024

_OP_CONT = 0x0
_OP_TEXT = 0x1
_OP_BINARY = 0x2
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA


class _WsClosed(ConnectionError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise _WsClosed("socket closed mid-frame")
        buf += chunk
    return bytes(buf)


def _ws_encode(opcode: int, payload: bytes) -> bytes:
    """Server-to-client frame: FIN set, never masked."""
    head = bytearray([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head.append(n)
    elif n < 1 << 16:
        head.append(126)
        head += struct.pack(">H", n)
    else:
        head.append(127)
        head += struct.pack(">Q", n)
    return bytes(head) + payload


def _ws_read_frame(sock: socket.socket) -> tuple[int, bool, bytes]:
    """Read one frame, returning (opcode, fin, unmasked payload)."""
    b0, b1 = _recv_exact(sock, 2)
    fin = bool(b0 & 0x80)
    if b0 & 0x70:
        raise _WsClosed("reserved bits set")
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", _recv_exact(sock, 2))
    elif n == 127:
        (n,) = struct.unpack(">Q", _recv_exact(sock, 8))
    if n > _MAX_WS_MESSAGE:
        raise _WsClosed(f"frame of {n} bytes exceeds cap")
    if opcode >= 0x8 and (n > 125 or not fin):
        raise _WsClosed("malformed control frame")
    if not masked:
        # Clients must mask; anything else is a broken or hostile peer.
        raise _WsClosed("unmasked client frame")
    mask = _recv_exact(sock, 4)
    payload = bytearray(_recv_exact(sock, n))
    for i in range(n):
        payload[i] ^= mask[i & 3]
    return opcode, fin, bytes(payload)


def _ws_read_message(sock: socket.socket, send_lock: threading.Lock) -> bytes:
    """Assemble one binary data message, servicing control frames inline.

    Returns b"" when the peer sends a close frame.
    """
    parts: list[bytes] = []
    total = 0
    while True:
        opcode, fin, payload = _ws_read_frame(sock)
        if opcode == _OP_CLOSE:
            with send_lock:
                try:
                    sock.sendall(_ws_encode(_OP_CLOSE, payload[:125]))
                except OSError:
                    pass
            return b""
        if opcode == _OP_PING:
            with send_lock:
                sock.sendall(_ws_encode(_OP_PONG, payload))
            continue
        if opcode == _OP_PONG:
            continue
        if opcode == _OP_TEXT:
            raise _WsClosed("text messages are not part of this protocol")
        if opcode == _OP_BINARY:
            if parts:
                raise _WsClosed("new message before prior message finished")
        elif opcode == _OP_CONT:
            if not parts:
                raise _WsClosed("continuation without a started message")
        else:
            raise _WsClosed(f"unsupported opcode {opcode}")
        total += len(payload)
        if total > _MAX_WS_MESSAGE:
            raise _WsClosed("fragmented message exceeds cap")
        parts.append(payload)
        if fin:
            return b"".join(parts)


def _handshake_response(headers: dict[str, str]) -> bytes:
    key = headers.get("sec-websocket-key", "")
    accept = base64.b64encode(
        hashlib.sha1((key + _WS_GUID).encode()).digest()).decode()
    return ("HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode()


def _read_request(sock: socket.socket) -> tuple[str, str, dict[str, str]]:
    """Read the request head. Returns (method, path, lowercase headers)."""
    buf = bytearray()
    while b"\r\n\r\n" not in buf:
        if len(buf) > _MAX_REQUEST:
            raise _WsClosed("request head too large")
        chunk = sock.recv(4096)
        if not chunk:
            raise _WsClosed("connection closed during request")
        buf += chunk
    head = bytes(buf).split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    parts = lines[0].split()
    if len(parts) != 3:
        raise _WsClosed(f"malformed request line: {lines[0]!r}")
    method, path = parts[0], parts[1]
    headers: dict[str, str] = {}
    for line in lines[1:]:
        name, sep, value = line.partition(":")
        if sep:
            headers[name.strip().lower()] = value.strip()
    return method, path, headers


def _http_response(status: str, body: bytes, ctype: str = "text/plain") -> bytes:
    return (f"HTTP/1.1 {status}\r\n"
            f"Content-Type: {ctype}\r\n"
            f"Content-Length: {len(body)}\r\n"
            "Cache-Control: no-cache\r\n"
            "Connection: close\r\n\r\n").encode() + body


_PLACEHOLDER = b"""<!doctype html>
<title>splatstream bridge</title>
<p>The WebSocket bridge is running. Connect a viewer to <code>/ws</code>,
or restart with <code>--assets</code> pointing at a built viewer bundle.</p>
"""


def _serve_static(sock: socket.socket, path: str, assets: Optional[str]) -> None:
    path = path.split("?", 1)[0]
    if assets is None:
        if path in ("/", "/index.html"):
            sock.sendall(_http_response("200 OK", _PLACEHOLDER, "text/html"))
        else:
            sock.sendall(_http_response("404 Not Found", b"not found"))
        return
    rel = path.lstrip("/") or "index.html"
    root = os.path.realpath(assets)
    full = os.path.realpath(os.path.join(root, rel))
    # realpath collapses any ../ tricks; anything escaping the root is refused
    if full != root and not full.startswith(root + os.sep):
        sock.sendall(_http_response("403 Forbidden", b"forbidden"))
        return
    if os.path.isdir(full):
        full = os.path.join(full, "index.html")
    if not os.path.isfile(full):
        sock.sendall(_http_response("404 Not Found", b"not found"))
        return
    ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
    with open(full, "rb") as f:
        body = f.read()
    sock.sendall(_http_response("200 OK", body, ctype))


def _proxy(ws: socket.socket, upstream_addr: tuple[str, int]) -> None:
    """Shuttle bytes between one WebSocket client and the stream server."""
    up = socket.create_connection(upstream_addr, timeout=10.0)
    up.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    up.settimeout(None)
    send_lock = threading.Lock()
    parser = FrameParser()
    try:
        while True:
            ready, _, _ = select.select([ws, up], [], [], 30.0)
            if up in ready:
                data = up.recv(1 << 16)
                if not data:
                    break
                parser.feed(data)
                # One wire frame per WebSocket message; the viewer never has
                # to reassemble partial packets.
                for frame in parser.frames():
                    raw = frame_bytes(frame.ptype, frame.epoch, frame.payload)
                    with send_lock:
                        ws.sendall(_ws_encode(_OP_BINARY, raw))
            if ws in ready:
                msg = _ws_read_message(ws, send_lock)
                if not msg:
                    break
                up.sendall(msg)
    finally:
        up.close()


def _handle_connection(sock: socket.socket, upstream: tuple[str, int],
                       assets: Optional[str]) -> None:
    try:
        sock.settimeout(10.0)
        method, path, headers = _read_request(sock)
        if "websocket" in headers.get("upgrade", "").lower():
            if method != "GET" or "sec-websocket-key" not in headers:
                sock.sendall(_http_response("400 Bad Request", b"bad upgrade"))
                return
            sock.sendall(_handshake_response(headers))
            sock.settimeout(None)
            log.info("websocket client connected: %s", path)
            _proxy(sock, upstream)
            log.info("websocket client disconnected")
        elif method in ("GET", "HEAD"):
            _serve_static(sock, path, assets)
        else:
            sock.sendall(_http_response("405 Method Not Allowed", b"nope"))
    except (_WsClosed, ProtocolError, OSError) as e:
        log.debug("connection ended: %s", e)
    finally:
        try:
            sock.close()
        except OSError:
            pass


def run_bridge(upstream: tuple[str, int], listen: tuple[str, int],
               assets: Optional[str] = None) -> None:
    """Serve until interrupted. Each browser gets its own upstream connection,
    so the stream server sees it as an ordinary client attach."""
    if assets is not None and not os.path.isdir(assets):
        raise FileNotFoundError(f"asset directory not found: {assets}")
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(listen)
    srv.listen(8)
    host, port = srv.getsockname()[:2]
    print(f"bridge listening on http://{host}:{port}/ "
          f"(upstream {upstream[0]}:{upstream[1]})")
    try:
        while True:
            conn, _ = srv.accept()
            t = threading.Thread(target=_handle_connection,
                                 args=(conn, upstream, assets), daemon=True)
            t.start()
    finally:
        srv.close()
