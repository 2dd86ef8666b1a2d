"""Block device abstraction, request/completion model and device registry.

Terminal devices (null, memory, file, remote) own storage; virtual devices
(raid, compress) transform I/O and forward it to their base devices. Every
device exposes the same synchronous ``execute(IORequest) -> IOCompletion``
entry point, which the engine calls from a single reactor thread.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

#: Largest payload a single device operation may carry (128 KiB).
MAX_IO_BYTES = 131072
MIN_BLOCK_SIZE = 512


class Op(enum.IntEnum):
    READ = 1
    WRITE = 2
    FLUSH = 3


class Status(enum.IntEnum):
    OK = 0
    IO_ERROR = 1
    PARITY_MISMATCH = 2
    OUT_OF_RANGE = 3
    UNSUPPORTED = 4
    SIZE_LIMIT = 5


class DeviceKind(enum.Enum):
    NULL = "null"
    MEMORY = "memory"
    FILE = "file"
    RAID = "raid"
    COMPRESS = "compress"
    REMOTE = "remote"

    @property
    def is_virtual(self) -> bool:
        return self in (DeviceKind.RAID, DeviceKind.COMPRESS)


class StackError(Exception):
    """Base class for configuration and registration problems."""


class ValidationError(StackError, ValueError):
    pass


class RegistrationError(StackError):
    pass


class DependencyError(RegistrationError):
    pass


class DeviceError(Exception):
    """Raised inside device logic; ``execute`` maps it onto a completion status."""

    status = Status.IO_ERROR

    def __init__(self, message: str = "", payload: bytes = b"", detail: Any = None):
        super().__init__(message)
        self.payload = payload
        self.detail = detail


class DeviceIOError(DeviceError):
    status = Status.IO_ERROR


class OutOfRange(DeviceError):
    status = Status.OUT_OF_RANGE


class UnsupportedIO(DeviceError):
    status = Status.UNSUPPORTED


class SizeLimitExceeded(DeviceError):
    status = Status.SIZE_LIMIT


class ParityMismatch(DeviceError):
    """Data was read but failed its parity check; ``payload`` holds the data."""

    status = Status.PARITY_MISMATCH


@dataclass(frozen=True)
class DeviceGeometry:
    block_size: int
    block_count: int

    def __post_init__(self):
        bs, n = self.block_size, self.block_count
        if not isinstance(bs, int) or not isinstance(n, int):
            raise ValidationError("geometry fields must be integers")
        if bs < MIN_BLOCK_SIZE or bs & (bs - 1):
            raise ValidationError(f"block_size {bs} must be a power of two >= {MIN_BLOCK_SIZE}")
        if bs > MAX_IO_BYTES:
            raise ValidationError(f"block_size {bs} exceeds the {MAX_IO_BYTES}-byte ceiling")
        if n <= 0:
            raise ValidationError(f"block_count must be positive, got {n}")

    @property
    def capacity(self) -> int:
        return self.block_size * self.block_count


_request_ids = itertools.count(1)
_request_id_lock = threading.Lock()


def next_request_id() -> int:
    with _request_id_lock:
        return next(_request_ids) & 0xFFFFFFFFFFFFFFFF


@dataclass
class IORequest:
    op: Op
    lba: int = 0
    num_blocks: int = 1
    payload: bytes = b""
    request_id: int = field(default_factory=next_request_id)

    @classmethod
    def read(cls, lba: int, num_blocks: int = 1, request_id: Optional[int] = None) -> "IORequest":
        req = cls(Op.READ, lba, num_blocks)
        if request_id is not None:
            req.request_id = request_id
        return req

    @classmethod
    def write(cls, lba: int, payload: bytes, block_size: int,
              request_id: Optional[int] = None) -> "IORequest":
        if block_size <= 0 or len(payload) % block_size:
            raise ValidationError(
                f"payload of {len(payload)} bytes is not a whole number of {block_size}-byte blocks")
        req = cls(Op.WRITE, lba, len(payload) // block_size, bytes(payload))
        if request_id is not None:
            req.request_id = request_id
        return req

    @classmethod
    def flush(cls, request_id: Optional[int] = None) -> "IORequest":
        req = cls(Op.FLUSH, 0, 0)
        if request_id is not None:
            req.request_id = request_id
        return req

    @property
    def nbytes_hint(self) -> int:
        return len(self.payload)


@dataclass
class IOCompletion:
    request_id: int
    status: Status
    payload: bytes = b""
    submit_to_complete_ns: int = 0
    detail: Any = None

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


@dataclass(frozen=True)
class DeviceHandle:
    device_id: str
    geometry: DeviceGeometry
    kind: DeviceKind


class BlockDevice:
    """Base class for every device in the stack.

    Subclasses implement ``read_blocks`` / ``write_blocks`` (and optionally
    ``flush``) and raise ``DeviceError`` subclasses on failure. Virtual devices
    call those methods on their bases directly; requests from outside the stack
    go through ``execute``.
    """

    kind: DeviceKind

    def __init__(self, device_id: str, geometry: DeviceGeometry,
                 bases: Sequence["BlockDevice"] = ()):
        self.device_id = device_id
        self.geometry = geometry
        self.bases = list(bases)
        self.reactor = None  # set by the engine when the device is pinned

    @property
    def handle(self) -> DeviceHandle:
        return DeviceHandle(self.device_id, self.geometry, self.kind)

    @property
    def block_size(self) -> int:
        return self.geometry.block_size

    def validate(self, req: IORequest) -> None:
        """Reject malformed requests before they are queued."""
        if req.op not in (Op.READ, Op.WRITE, Op.FLUSH):
            raise ValidationError(f"unknown op {req.op!r}")
        if req.lba < 0:
            raise ValidationError(f"negative lba {req.lba}")
        if req.op is Op.FLUSH:
            if req.payload:
                raise ValidationError("FLUSH carries no payload")
            return
        if req.num_blocks <= 0:
            raise ValidationError(f"num_blocks must be positive, got {req.num_blocks}")
        if req.op is Op.WRITE:
            expected = req.num_blocks * self.block_size
            if len(req.payload) != expected:
                raise ValidationError(
                    f"WRITE payload is {len(req.payload)} bytes, expected {expected}")
        elif req.payload:
            raise ValidationError("READ carries no payload at submission")

    def precheck(self, req: IORequest) -> Optional[Status]:
        """Status for requests that fail without touching the device, else None."""
        if req.op is Op.FLUSH:
            return None
        if req.lba + req.num_blocks > self.geometry.block_count:
            return Status.OUT_OF_RANGE
        if req.num_blocks * self.block_size > MAX_IO_BYTES:
            return Status.SIZE_LIMIT
        return None

    def execute(self, req: IORequest) -> IOCompletion:
        t0 = time.perf_counter_ns()
        self.validate(req)
        status = self.precheck(req)
        payload = b""
        detail = None
        if status is None:
            status = Status.OK
            try:
                if req.op is Op.READ:
                    payload = self.read_blocks(req.lba, req.num_blocks)
                elif req.op is Op.WRITE:
                    self.write_blocks(req.lba, req.payload)
                else:
                    self.flush()
            except DeviceError as exc:
                status = exc.status
                detail = exc.detail if exc.detail is not None else str(exc)
                if exc.status is Status.PARITY_MISMATCH:
                    payload = exc.payload
            except OSError as exc:
                status = Status.IO_ERROR
                detail = f"{type(exc).__name__}: {exc}"
        return IOCompletion(req.request_id, status, payload,
                            time.perf_counter_ns() - t0, detail)

    def read_blocks(self, lba: int, num_blocks: int) -> bytes:
        raise NotImplementedError

    def write_blocks(self, lba: int, data: bytes) -> None:
        raise NotImplementedError

    def flush(self) -> None:
        for base in self.bases:
            base.flush()

    def close(self) -> None:
        pass

    def __repr__(self):
        g = self.geometry
        return f"<{type(self).__name__} {self.device_id!r} {g.block_size}x{g.block_count}>"


@dataclass
class DeviceSpec:
    """Declarative description of one device, as consumed by ``Registry.register_device``."""

    id: str
    kind: DeviceKind
    block_size: Optional[int] = None
    block_count: Optional[int] = None
    bases: list = field(default_factory=list)
    params: dict = field(default_factory=dict)


def _build(spec: DeviceSpec, bases: list) -> BlockDevice:
    # Imported lazily: these modules depend on blockcore.
    kind = spec.kind
    p = spec.params
    if kind in (DeviceKind.NULL, DeviceKind.MEMORY, DeviceKind.FILE):
        from . import backstores
        if spec.block_size is None or spec.block_count is None:
            raise ValidationError(f"device {spec.id!r}: {kind.value} needs block_size and block_count")
        geometry = DeviceGeometry(spec.block_size, spec.block_count)
        if kind is DeviceKind.NULL:
            return backstores.NullDevice(spec.id, geometry)
        if kind is DeviceKind.MEMORY:
            return backstores.MemoryDevice(spec.id, geometry)
        if "path" not in p:
            raise ValidationError(f"device {spec.id!r}: file device needs a path")
        return backstores.FileDevice(spec.id, geometry, p["path"], sparse=p.get("sparse", True))
    if kind is DeviceKind.RAID:
        from . import raid
        return raid.RaidDevice.from_params(spec.id, bases, p)
    if kind is DeviceKind.COMPRESS:
        from . import compress
        if len(bases) != 1:
            raise ValidationError(f"device {spec.id!r}: compress takes exactly one base")
        return compress.CompressDevice.from_params(spec.id, bases[0], spec.block_size,
                                                   spec.block_count, p)
    if kind is DeviceKind.REMOTE:
        from . import export
        if "endpoint" not in p:
            raise ValidationError(f"device {spec.id!r}: remote device needs an endpoint")
        return export.RemoteDevice(spec.id, p["endpoint"], timeout=p.get("timeout", 5.0))
    raise ValidationError(f"unknown device kind {kind!r}")


class Registry:
    """Owns the devices of one stack, keyed by id.

    ``submit_io`` / ``poll`` give simple asynchronous access through default
    per-device channels on the registry's reactor; code that needs depth control
    should create its own channels via ``bdevstack.engine``.
    """

    def __init__(self, reactor=None):
        self._devices: dict[str, BlockDevice] = {}
        self._reactor = reactor
        self._default_channels: dict = {}

    def register_device(self, spec: DeviceSpec) -> DeviceHandle:
        if spec.id in self._devices:
            raise RegistrationError(f"duplicate device id {spec.id!r}")
        missing = [b for b in spec.bases if b not in self._devices]
        if missing:
            raise DependencyError(f"device {spec.id!r} references unregistered base(s) {missing}")
        if spec.kind.is_virtual and not spec.bases:
            raise DependencyError(f"device {spec.id!r}: {spec.kind.value} needs base devices")
        device = _build(spec, [self._devices[b] for b in spec.bases])
        self._devices[spec.id] = device
        return device.handle

    def add(self, device: BlockDevice) -> DeviceHandle:
        if device.device_id in self._devices:
            raise RegistrationError(f"duplicate device id {device.device_id!r}")
        for base in device.bases:
            if self._devices.get(base.device_id) is not base:
                raise DependencyError(f"base {base.device_id!r} is not registered")
        self._devices[device.device_id] = device
        return device.handle

    def get(self, device_id) -> BlockDevice:
        if isinstance(device_id, DeviceHandle):
            device_id = device_id.device_id
        try:
            return self._devices[device_id]
        except KeyError:
            raise DependencyError(f"unknown device {device_id!r}") from None

    def __contains__(self, device_id) -> bool:
        return device_id in self._devices

    def __iter__(self):
        return iter(self._devices.values())

    def __len__(self):
        return len(self._devices)

    @property
    def reactor(self):
        if self._reactor is None:
            from .engine import Reactor
            self._reactor = Reactor(name="registry")
        return self._reactor

    def _channel(self, handle):
        device = self.get(handle)
        ch = self._default_channels.get(device.device_id)
        if ch is None:
            ch = self.reactor.create_channel(device, depth=1024)
            self._default_channels[device.device_id] = ch
        return ch

    def submit_io(self, handle, req: IORequest) -> int:
        """Queue ``req`` on the device's default channel and return its request id."""
        return self._channel(handle).submit(req)

    def poll(self, handle, max_completions: Optional[int] = None) -> list:
        """Collect finished completions; drives the reactor once if it is not running."""
        ch = self._channel(handle)
        if not self.reactor.running:
            self.reactor.run_once()
        return ch.poll(max_completions)

    def close(self) -> None:
        for device in reversed(list(self._devices.values())):
            device.close()
        self._devices.clear()
        self._default_channels.clear()
