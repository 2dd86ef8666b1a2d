"""Framed binary protocol spoken between block clients and targets.

Every frame starts with a 27-byte little-endian header::

    offset  size  field
    0       4     magic "FBSO" (46 42 53 4F)
    4       1     version (1)
    5       1     opcode: 1 READ, 2 WRITE, 3 FLUSH, 4 INFO; responses set bit 0x80
    6       8     request_id
    14      8     offset_bytes
    22      4     length_bytes (<= 131072)
    26      1     status (responses; 0 in requests)

followed by ``length_bytes`` of payload when the frame carries data: WRITE
requests, and READ / INFO responses whose status is OK or PARITY_MISMATCH.
Other frames use ``length_bytes`` as a size field only (the requested length
of a READ, or an echo in WRITE responses).

The INFO response payload is 12 bytes: block_size (u32) and block_count (u64).
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

from .blockcore import MAX_IO_BYTES, DeviceGeometry, SizeLimitExceeded, Status

MAGIC = b"FBSO"
VERSION = 1
RESPONSE_BIT = 0x80
HEADER = struct.Struct("<4sBBQQIB")
HEADER_SIZE = HEADER.size
INFO_PAYLOAD = struct.Struct("<IQ")
MAX_PAYLOAD = MAX_IO_BYTES

assert HEADER_SIZE == 27


class Opcode(enum.IntEnum):
    READ = 1
    WRITE = 2
    FLUSH = 3
    INFO = 4


class FrameError(ValueError):
    """A frame could not be decoded. ``header`` holds the raw header bytes if any."""

    def __init__(self, message: str, header: bytes = b""):
        super().__init__(message)
        self.header = header


@dataclass(frozen=True)
class Frame:
    opcode: Opcode
    request_id: int
    offset: int = 0
    length: int = 0
    status: Status = Status.OK
    payload: bytes = b""
    response: bool = False

    @property
    def carries_payload(self) -> bool:
        return carries_payload(self.opcode, self.response, self.status)


def carries_payload(opcode: Opcode, response: bool, status: Status) -> bool:
    if not response:
        return opcode == Opcode.WRITE
    return opcode in (Opcode.READ, Opcode.INFO) and status in (Status.OK, Status.PARITY_MISMATCH)


def request(opcode, request_id, offset=0, length=0, payload=b"") -> Frame:
    if opcode == Opcode.WRITE:
        length = len(payload)
    else:
        payload = b""
    return Frame(Opcode(opcode), request_id, offset, length, Status.OK, bytes(payload), False)


def response(req: Frame, status: Status, payload: bytes = b"") -> Frame:
    length = len(payload) if carries_payload(req.opcode, True, status) else req.length
    if not carries_payload(req.opcode, True, status):
        payload = b""
    return Frame(req.opcode, req.request_id, req.offset, length, Status(status), payload, True)


def info_payload(geometry: DeviceGeometry) -> bytes:
    return INFO_PAYLOAD.pack(geometry.block_size, geometry.block_count)


def parse_info(payload: bytes) -> DeviceGeometry:
    if len(payload) != INFO_PAYLOAD.size:
        raise FrameError(f"INFO payload must be {INFO_PAYLOAD.size} bytes, got {len(payload)}")
    bs, count = INFO_PAYLOAD.unpack(payload)
    return DeviceGeometry(bs, count)


def encode_header(f: Frame) -> bytes:
    if f.length > MAX_PAYLOAD:
        raise SizeLimitExceeded(f"frame length {f.length} exceeds {MAX_PAYLOAD}")
    if f.carries_payload and len(f.payload) != f.length:
        raise FrameError(f"payload is {len(f.payload)} bytes but length field is {f.length}")
    opcode = int(f.opcode) | (RESPONSE_BIT if f.response else 0)
    return HEADER.pack(MAGIC, VERSION, opcode, f.request_id, f.offset, f.length,
                       int(f.status) if f.response else 0)


def encode_frame(f: Frame) -> bytes:
    header = encode_header(f)
    return header + f.payload if f.carries_payload else header


@dataclass(frozen=True)
class Header:
    opcode: Opcode
    response: bool
    request_id: int
    offset: int
    length: int
    status: Status

    @property
    def payload_length(self) -> int:
        return self.length if carries_payload(self.opcode, self.response, self.status) else 0


def decode_header(raw: bytes) -> Header:
    if len(raw) != HEADER_SIZE:
        raise FrameError(f"header must be {HEADER_SIZE} bytes, got {len(raw)}", bytes(raw))
    magic, version, op, rid, offset, length, status = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}", bytes(raw))
    if version != VERSION:
        raise FrameError(f"unsupported version {version}", bytes(raw))
    try:
        opcode = Opcode(op & ~RESPONSE_BIT)
    except ValueError:
        raise FrameError(f"unknown opcode 0x{op:02x}", bytes(raw)) from None
    is_response = bool(op & RESPONSE_BIT)
    try:
        st = Status(status)
    except ValueError:
        raise FrameError(f"unknown status {status}", bytes(raw)) from None
    if not is_response and st is not Status.OK:
        raise FrameError("request frames must carry status 0", bytes(raw))
    if length > MAX_PAYLOAD:
        raise FrameError(f"length {length} exceeds {MAX_PAYLOAD}", bytes(raw))
    return Header(opcode, is_response, rid, offset, length, st)


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame from ``data``."""
    frame, used = decode_prefix(data)
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return frame


def decode_prefix(data: bytes):
    """Decode the frame at the start of ``data``; returns (frame, bytes consumed)."""
    h = decode_header(bytes(data[:HEADER_SIZE]))
    n = h.payload_length
    end = HEADER_SIZE + n
    if len(data) < end:
        raise FrameError(f"truncated payload: need {n} bytes, have {len(data) - HEADER_SIZE}")
    payload = bytes(data[HEADER_SIZE:end])
    return Frame(h.opcode, h.request_id, h.offset, h.length, h.status, payload, h.response), end


def decode_stream(data: bytes) -> list:
    frames = []
    pos = 0
    while pos < len(data):
        frame, used = decode_prefix(memoryview(data)[pos:])
        frames.append(frame)
        pos += used
    return frames


class ConnectionClosed(EOFError):
    pass


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionClosed(f"peer closed after {got} of {n} bytes")
        got += k
    return bytes(buf)


def read_raw_frame(sock: socket.socket):
    """Read one frame without copying the payload into a Frame; returns (header, raw bytes)."""
    raw = recv_exact(sock, HEADER_SIZE)
    h = decode_header(raw)
    n = h.payload_length
    if n:
        raw = raw + recv_exact(sock, n)
    return h, raw


def read_frame(sock: socket.socket) -> Frame:
    h, raw = read_raw_frame(sock)
    return Frame(h.opcode, h.request_id, h.offset, h.length, h.status,
                 raw[HEADER_SIZE:], h.response)
