"""Terminal block devices: null, memory and file-backed."""

from __future__ import annotations

import os

from .blockcore import BlockDevice, DeviceGeometry, DeviceIOError, DeviceKind


class NullDevice(BlockDevice):
    """Discards writes and reads back zeros."""

    kind = DeviceKind.NULL

    def read_blocks(self, lba, num_blocks):
        return bytes(num_blocks * self.block_size)

    def write_blocks(self, lba, data):
        pass


class MemoryDevice(BlockDevice):
    """Zero-initialized RAM-backed device (the usual base for virtual devices)."""

    kind = DeviceKind.MEMORY

    def __init__(self, device_id: str, geometry: DeviceGeometry):
        super().__init__(device_id, geometry)
        self._cells = bytearray(geometry.capacity)
        self._view = memoryview(self._cells)

    def read_blocks(self, lba, num_blocks):
        bs = self.block_size
        return bytes(self._view[lba * bs:(lba + num_blocks) * bs])

    def write_blocks(self, lba, data):
        off = lba * self.block_size
        self._view[off:off + len(data)] = data

    def raw(self) -> memoryview:
        """Direct view of the backing cells, for fault-injection tests."""
        return self._view

    def close(self):
        self._view.release()


class FileDevice(BlockDevice):
    """Device backed by a regular file using positioned reads and writes.

    There is no caching layer of our own; FLUSH issues ``fsync``. The backing
    file is checked on every I/O so that a file removed or replaced underneath a
    running stack surfaces as ``IO_ERROR`` instead of writes to an unlinked inode.
    """

    kind = DeviceKind.FILE

    def __init__(self, device_id: str, geometry: DeviceGeometry, path, sparse: bool = True):
        super().__init__(device_id, geometry)
        self.path = os.fspath(path)
        self.sparse = sparse
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            size = os.fstat(self._fd).st_size
            if size < geometry.capacity:
                if sparse:
                    os.ftruncate(self._fd, geometry.capacity)
                else:
                    self._fill_zeros(size, geometry.capacity)
            st = os.fstat(self._fd)
            self._ident = (st.st_dev, st.st_ino)
        except OSError:
            os.close(self._fd)
            raise

    def _fill_zeros(self, start, end):
        chunk = bytes(1 << 20)
        off = start
        while off < end:
            n = min(len(chunk), end - off)
            os.pwrite(self._fd, chunk[:n], off)
            off += n

    def _check_backing(self):
        if self._fd < 0:
            raise DeviceIOError(f"{self.device_id}: device is closed")
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            raise DeviceIOError(f"{self.device_id}: backing file {self.path} was removed") from None
        if (st.st_dev, st.st_ino) != self._ident:
            raise DeviceIOError(f"{self.device_id}: backing file {self.path} was replaced")

    def read_blocks(self, lba, num_blocks):
        self._check_backing()
        bs = self.block_size
        n = num_blocks * bs
        data = os.pread(self._fd, n, lba * bs)
        if len(data) < n:
            # short read past EOF of a file truncated externally
            raise DeviceIOError(f"{self.device_id}: short read ({len(data)} of {n} bytes)")
        return data

    def write_blocks(self, lba, data):
        self._check_backing()
        off = lba * self.block_size
        view = memoryview(data)
        while view:
            written = os.pwrite(self._fd, view, off)
            view = view[written:]
            off += written

    def flush(self):
        self._check_backing()
        os.fsync(self._fd)

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1
