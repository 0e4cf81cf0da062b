"""Packet framing: magic, type, epoch, length, payload, crc32."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Optional

MAGIC = b"GS"
HEADER = struct.Struct("<BII")  # type, epoch, payload_length (after the magic)
CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 28  # defensive cap so corrupt lengths cannot balloon memory
MAX_ROWS = 1 << 24  # most rows a snapshot or delta may declare


class ProtocolError(Exception):
    pass


class PacketType(IntEnum):
    OBJECT_ID_MAP = 0x01
    OBJECT_TRANSFORMS = 0x02
    MODEL_SNAPSHOT = 0x03
    TENSOR_METADATA = 0x04
    TENSOR_DELTA = 0x05
    LIGHT_VISIBILITY = 0x06
    GAUSSIAN_ID_ORDERING = 0x07
    LIGHT_STATE = 0x08
    CAMERA_POSE = 0x09


class AttributeId(IntEnum):
    MEANS = 0
    LOG_SCALES = 1
    QUATERNIONS = 2
    LOGIT_OPACITIES = 3
    SH_DC = 4
    SH_REST = 5
    LIGHT_VISIBILITY = 6


@dataclass
class Frame:
    ptype: PacketType
    epoch: int
    payload: bytes


def frame_bytes(ptype: int, epoch: int, payload: bytes) -> bytes:
    body = HEADER.pack(int(ptype), epoch, len(payload)) + payload
    return MAGIC + body + CRC.pack(zlib.crc32(body))


def parse_frame(buf: bytes, offset: int = 0) -> tuple[Optional[Frame], int]:
    """Parse one frame at `offset`. Returns (frame, next offset); (None, offset)
    when more bytes are needed. Malformed data raises ProtocolError."""
    avail = len(buf) - offset
    if avail < 2 + HEADER.size:
        return None, offset
    if buf[offset:offset + 2] != MAGIC:
        raise ProtocolError("bad magic")
    ptype, epoch, length = HEADER.unpack_from(buf, offset + 2)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds cap")
    total = 2 + HEADER.size + length + CRC.size
    if avail < total:
        return None, offset
    body_start = offset + 2
    body_end = body_start + HEADER.size + length
    (crc,) = CRC.unpack_from(buf, body_end)
    if crc != zlib.crc32(bytes(buf[body_start:body_end])):
        raise ProtocolError("crc mismatch")
    try:
        ptype = PacketType(ptype)
    except ValueError:
        raise ProtocolError(f"unknown packet type 0x{ptype:02x}") from None
    payload = bytes(buf[body_start + HEADER.size:body_end])
    return Frame(ptype=ptype, epoch=epoch, payload=payload), offset + total


class FrameParser:
    """Incremental parser over a reliable byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    def frames(self) -> Iterator[Frame]:
        offset = 0
        while True:
            frame, offset = parse_frame(self._buf, offset)
            if frame is None:
                break
            yield frame
        del self._buf[:offset]

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
