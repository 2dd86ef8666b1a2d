"""Transparent compression virtual block device.

Each logical block is deflate-compressed on write and stored as a byte extent
on the base device; reads look the extent up, fetch it and inflate it. Blocks
that do not shrink are stored raw and flagged as such, so stored bytes never
exceed logical bytes.

Extents are byte-packed: a 4 KiB block compressed to 900 bytes occupies 900
bytes of the base device, and writes that straddle base blocks do a
read-modify-write of the partial base blocks. Space is handed out by an
append cursor with a coalescing first-fit free list; there is no compaction.
"""

from __future__ import annotations

import bisect
import json
import os
import zlib
from dataclasses import dataclass
from typing import Optional

from .blockcore import (
    MAX_IO_BYTES,
    BlockDevice,
    DeviceGeometry,
    DeviceIOError,
    DeviceKind,
    IOCompletion,
    IORequest,
    SizeLimitExceeded,
    ValidationError,
)

DEFAULT_MAX_JOB_BYTES = 128 * 1024 * 1024
DEFAULT_LEVEL = 6


@dataclass(frozen=True)
class CompressLimits:
    max_job_bytes: int = DEFAULT_MAX_JOB_BYTES
    max_io_bytes: int = MAX_IO_BYTES

    def __post_init__(self):
        if self.max_job_bytes <= 0 or self.max_io_bytes <= 0:
            raise ValidationError("compression limits must be positive")


DEFAULT_LIMITS = CompressLimits()


def compress_block(data, level: int = DEFAULT_LEVEL,
                   limits: CompressLimits = DEFAULT_LIMITS) -> bytes:
    """Deflate ``data`` into a zlib-wrapped stream."""
    if len(data) > limits.max_job_bytes:
        raise SizeLimitExceeded(
            f"compression job of {len(data)} bytes exceeds {limits.max_job_bytes}")
    return zlib.compress(data, level)


def decompress_block(stream, expected_len: int,
                     limits: CompressLimits = DEFAULT_LIMITS) -> bytes:
    """Inflate ``stream``; anything other than exactly ``expected_len`` bytes is an error."""
    if expected_len > limits.max_job_bytes:
        raise SizeLimitExceeded(
            f"decompression job of {expected_len} bytes exceeds {limits.max_job_bytes}")
    d = zlib.decompressobj()
    try:
        out = d.decompress(stream, expected_len + 1)
    except zlib.error as exc:
        raise DeviceIOError(f"corrupt deflate stream: {exc}") from None
    if len(out) != expected_len:
        raise DeviceIOError(f"inflated to {len(out)}+ bytes, expected {expected_len}")
    if not d.eof:
        raise DeviceIOError("truncated deflate stream")
    if d.unused_data or d.unconsumed_tail:
        raise DeviceIOError("trailing bytes after deflate stream")
    return out


@dataclass(frozen=True)
class Extent:
    offset: int
    length: int
    compressed: bool


class ExtentAllocator:
    """Byte-granular allocator: first fit over freed holes, else bump the cursor."""

    def __init__(self, capacity: int, cursor: int = 0, free=()):
        self.capacity = capacity
        self.cursor = cursor
        self._free: list[tuple[int, int]] = sorted(free)

    @property
    def free_extents(self):
        return list(self._free)

    def allocate(self, n: int) -> int:
        for i, (off, length) in enumerate(self._free):
            if length >= n:
                if length == n:
                    del self._free[i]
                else:
                    self._free[i] = (off + n, length - n)
                return off
        if self.cursor + n > self.capacity:
            raise DeviceIOError(f"base device full: no room for a {n}-byte extent")
        off = self.cursor
        self.cursor += n
        return off

    def release(self, offset: int, n: int) -> None:
        i = bisect.bisect_left(self._free, (offset, n))
        if i > 0:
            p_off, p_len = self._free[i - 1]
            if p_off + p_len == offset:
                offset, n = p_off, p_len + n
                i -= 1
                del self._free[i]
        if i < len(self._free) and offset + n == self._free[i][0]:
            n += self._free[i][1]
            del self._free[i]
        if offset + n == self.cursor:
            self.cursor = offset
        else:
            self._free.insert(i, (offset, n))

    def claim(self, offset: int, n: int) -> None:
        """Take back a specific range previously released (used to undo a failed overwrite)."""
        if offset >= self.cursor:
            if offset > self.cursor:
                self._free.append((self.cursor, offset - self.cursor))
                self._free.sort()
            self.cursor = offset + n
            return
        for i, (off, length) in enumerate(self._free):
            if off <= offset and offset + n <= off + length:
                del self._free[i]
                if off < offset:
                    self._free.insert(i, (off, offset - off))
                    i += 1
                if offset + n < off + length:
                    self._free.insert(i, (offset + n, off + length - offset - n))
                return
        raise DeviceIOError(f"range {offset}+{n} is not free")


class CompressionMap:
    def __init__(self, capacity_bytes: int):
        self.entries: dict[int, Extent] = {}
        self.allocator = ExtentAllocator(capacity_bytes)
        self.stored_bytes = 0

    def lookup(self, lba: int) -> Optional[Extent]:
        return self.entries.get(lba)

    def replace(self, lba: int, length: int, compressed: bool) -> Extent:
        old = self.entries.pop(lba, None)
        if old is not None:
            self.allocator.release(old.offset, old.length)
            self.stored_bytes -= old.length
        try:
            offset = self.allocator.allocate(length)
        except DeviceIOError:
            if old is not None:
                self.allocator.claim(old.offset, old.length)
                self.entries[lba] = old
                self.stored_bytes += old.length
            raise
        ext = Extent(offset, length, compressed)
        self.entries[lba] = ext
        self.stored_bytes += length
        return ext

    def to_dict(self) -> dict:
        return {
            "capacity": self.allocator.capacity,
            "cursor": self.allocator.cursor,
            "free": self.allocator.free_extents,
            "entries": {str(lba): [e.offset, e.length, e.compressed]
                        for lba, e in self.entries.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CompressionMap":
        m = cls(doc["capacity"])
        m.allocator = ExtentAllocator(doc["capacity"], doc["cursor"],
                                      [tuple(f) for f in doc["free"]])
        for lba, (off, length, comp) in doc["entries"].items():
            m.entries[int(lba)] = Extent(off, length, bool(comp))
            m.stored_bytes += length
        return m


class CompressDevice(BlockDevice):
    kind = DeviceKind.COMPRESS

    def __init__(self, device_id: str, base: BlockDevice, block_size: Optional[int] = None,
                 block_count: Optional[int] = None, limits: CompressLimits = DEFAULT_LIMITS,
                 level: int = DEFAULT_LEVEL, map_path=None):
        block_size = block_size or base.block_size
        capacity = base.geometry.capacity
        if block_count is None:
            block_count = capacity // block_size
        super().__init__(device_id, DeviceGeometry(block_size, block_count), [base])
        self.base = base
        self.limits = limits
        self.level = level
        self.map_path = os.fspath(map_path) if map_path else None
        if self.map_path and os.path.exists(self.map_path):
            with open(self.map_path) as f:
                self.map = CompressionMap.from_dict(json.load(f))
            if self.map.allocator.capacity != capacity:
                raise ValidationError(f"{device_id}: map checkpoint does not match base capacity")
        else:
            self.map = CompressionMap(capacity)

    @classmethod
    def from_params(cls, device_id, base, block_size, block_count, params: dict):
        limits = CompressLimits(
            max_job_bytes=int(params.get("max_job_bytes", DEFAULT_MAX_JOB_BYTES)))
        return cls(device_id, base, block_size, block_count, limits=limits,
                   level=int(params.get("level", DEFAULT_LEVEL)),
                   map_path=params.get("map_path"))

    @property
    def stored_bytes(self) -> int:
        return self.map.stored_bytes

    @property
    def logical_bytes(self) -> int:
        return len(self.map.entries) * self.block_size

    # -- byte-extent I/O on the base ------------------------------------------

    def _chunk_blocks(self) -> int:
        return max(1, min(self.limits.max_io_bytes, MAX_IO_BYTES) // self.base.block_size)

    def _read_base(self, first: int, count: int) -> bytes:
        step = self._chunk_blocks()
        return b"".join(self.base.read_blocks(b, min(step, first + count - b))
                        for b in range(first, first + count, step))

    def _write_base(self, first: int, data) -> None:
        bbs = self.base.block_size
        step = self._chunk_blocks()
        view = memoryview(data)
        for i in range(0, len(data) // bbs, step):
            self.base.write_blocks(first + i, view[i * bbs:(i + step) * bbs])

    def _write_bytes(self, offset: int, payload: bytes) -> None:
        bbs = self.base.block_size
        first = offset // bbs
        last = (offset + len(payload) - 1) // bbs
        count = last - first + 1
        buf = bytearray(count * bbs)
        if offset % bbs:
            buf[:bbs] = self.base.read_blocks(first, 1)
        if (offset + len(payload)) % bbs and (count > 1 or offset % bbs == 0):
            buf[-bbs:] = self.base.read_blocks(last, 1)
        start = offset - first * bbs
        buf[start:start + len(payload)] = payload
        self._write_base(first, buf)

    def _read_bytes(self, offset: int, length: int) -> bytes:
        bbs = self.base.block_size
        first = offset // bbs
        last = (offset + length - 1) // bbs
        raw = self._read_base(first, last - first + 1)
        start = offset - first * bbs
        return raw[start:start + length]

    # -- per-block paths ----------------------------------------------------

    def _store(self, lba: int, block) -> None:
        bs = self.block_size
        packed = compress_block(block, self.level, self.limits)
        if len(packed) < bs:
            payload, compressed = packed, True
        else:
            payload, compressed = bytes(block), False
        ext = self.map.replace(lba, len(payload), compressed)
        self._write_bytes(ext.offset, payload)

    def _load(self, lba: int) -> bytes:
        bs = self.block_size
        ext = self.map.lookup(lba)
        if ext is None:
            return bytes(bs)
        stored = self._read_bytes(ext.offset, ext.length)
        if ext.compressed:
            return decompress_block(stored, bs, self.limits)
        if len(stored) != bs:
            raise DeviceIOError(f"raw extent for lba {lba} has {len(stored)} bytes")
        return stored

    def read_blocks(self, lba, num_blocks):
        return b"".join(self._load(lba + i) for i in range(num_blocks))

    def write_blocks(self, lba, data):
        bs = self.block_size
        view = memoryview(data)
        for i in range(len(data) // bs):
            self._store(lba + i, view[i * bs:(i + 1) * bs])

    def cwrite(self, lba: int, data) -> IOCompletion:
        return self.execute(IORequest.write(lba, bytes(data), self.block_size))

    def cread(self, lba: int) -> IOCompletion:
        return self.execute(IORequest.read(lba))

    def flush(self):
        self.base.flush()
        if self.map_path:
            tmp = self.map_path + ".tmp"
            with open(tmp, "w") as f:
                json.dump(self.map.to_dict(), f)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.map_path)
