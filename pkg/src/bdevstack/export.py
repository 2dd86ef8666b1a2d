"""Network block target and client.

Two target modes:

* ``PROCESSED`` - frames become ``IORequest``s on a local device (the whole
  virtual device stack runs here) and completions go back as responses,
  status for status, including ``PARITY_MISMATCH``.
* ``PASSTHROUGH`` - frames are relayed verbatim to an upstream target and
  responses relayed back. Only headers are decoded; payloads are never
  inspected.

Each connection gets a reader (the handler thread) and a writer pump, so a
client may pipeline many requests and match responses by ``request_id``.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import threading
import time
from concurrent.futures import Future, TimeoutError as FutureTimeout
from typing import Optional

from . import wire
from .blockcore import (
    BlockDevice,
    DeviceError,
    DeviceGeometry,
    DeviceIOError,
    DeviceKind,
    IOCompletion,
    IORequest,
    Op,
    OutOfRange,
    ParityMismatch,
    SizeLimitExceeded,
    Status,
    UnsupportedIO,
    ValidationError,
)
from .wire import Frame, FrameError, Opcode

log = logging.getLogger(__name__)


class TargetMode(enum.Enum):
    PROCESSED = "processed"
    PASSTHROUGH = "passthrough"


def parse_endpoint(endpoint) -> tuple:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    text = str(endpoint)
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValidationError(f"endpoint {text!r} is not host:port")
    return host.strip("[]") or "127.0.0.1", int(port)


def format_endpoint(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


def _error_response_for(header_bytes: bytes) -> bytes:
    """Best-effort IO_ERROR reply to a frame that failed to decode."""
    opcode, rid = Opcode.INFO, 0
    if len(header_bytes) >= 14:
        op = header_bytes[5] & ~wire.RESPONSE_BIT
        if op in Opcode._value2member_map_:
            opcode = Opcode(op)
        rid = int.from_bytes(header_bytes[6:14], "little")
    return wire.encode_frame(Frame(opcode, rid, 0, 0, Status.IO_ERROR, b"", True))


def _frame_from_header(h: wire.Header) -> Frame:
    return Frame(h.opcode, h.request_id, h.offset, h.length, h.status, b"", h.response)


class _Connection:
    def __init__(self, target: "BlockTarget", sock: socket.socket):
        self.target = target
        self.sock = sock
        self.send_lock = threading.Lock()
        self.closed = threading.Event()

    def send(self, data: bytes) -> None:
        with self.send_lock:
            self.sock.sendall(data)

    def close(self) -> None:
        self.closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _ProcessedConnection(_Connection):
    def __init__(self, target, sock):
        super().__init__(target, sock)
        self.device: BlockDevice = target.device
        self.channel = target.reactor.create_channel(self.device, target.depth)
        self.pending: dict[int, wire.Header] = {}
        self._writer = threading.Thread(target=self._write_loop, daemon=True,
                                        name=f"{target.name}-writer")

    def run(self) -> None:
        self._writer.start()
        try:
            while not self.closed.is_set():
                try:
                    h, raw = wire.read_raw_frame(self.sock)
                except FrameError as exc:
                    log.info("%s: malformed frame: %s", self.target.name, exc)
                    self.send(_error_response_for(exc.header))
                    break
                if h.response:
                    self.send(_error_response_for(raw[:wire.HEADER_SIZE]))
                    break
                self._handle(h, raw[wire.HEADER_SIZE:])
        except (wire.ConnectionClosed, OSError):
            pass
        finally:
            self.closed.set()
            self._writer.join()
            self.channel.close()
            self.sock.close()

    def _reply(self, h: wire.Header, status: Status, payload: bytes = b"") -> None:
        self.send(wire.encode_frame(wire.response(_frame_from_header(h), status, payload)))

    def _handle(self, h: wire.Header, payload: bytes) -> None:
        geometry = self.device.geometry
        if h.opcode == Opcode.INFO:
            self._reply(h, Status.OK, wire.info_payload(geometry))
            return
        if h.request_id in self.pending:
            self._reply(h, Status.UNSUPPORTED)
            return
        if h.opcode == Opcode.FLUSH:
            req = IORequest.flush(h.request_id)
        else:
            bs = geometry.block_size
            if h.offset % bs or h.length % bs or h.length == 0:
                self._reply(h, Status.UNSUPPORTED)
                return
            op = Op.READ if h.opcode == Opcode.READ else Op.WRITE
            req = IORequest(op, h.offset // bs, h.length // bs, payload, h.request_id)
        self.pending[h.request_id] = h
        try:
            self.channel.submit(req)
        except ValidationError:
            del self.pending[h.request_id]
            self._reply(h, Status.UNSUPPORTED)

    def _write_loop(self) -> None:
        ch = self.channel
        while True:
            c = ch.get(timeout=0.05)
            if c is not None:
                self._send_completion(c)
            elif self.closed.is_set() and ch.inflight == 0:
                for c in ch.poll():
                    self._send_completion(c)
                return

    def _send_completion(self, c: IOCompletion) -> None:
        h = self.pending.pop(c.request_id)
        try:
            self._reply(h, c.status, c.payload)
        except OSError:
            self.closed.set()


class _RelayConnection(_Connection):
    def __init__(self, target, sock):
        super().__init__(target, sock)
        self.outstanding: dict[int, wire.Header] = {}
        self.lock = threading.Lock()
        self.upstream: Optional[socket.socket] = None
        try:
            up = socket.create_connection(target.upstream, timeout=target.upstream_timeout)
            up.settimeout(None)
            up.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.upstream = up
        except OSError as exc:
            log.warning("%s: upstream %s unreachable: %s", target.name,
                        format_endpoint(target.upstream), exc)

    def _fail(self, h: wire.Header) -> None:
        self.send(wire.encode_frame(wire.response(_frame_from_header(h), Status.IO_ERROR)))

    def _upstream_lost(self) -> None:
        with self.lock:
            up, self.upstream = self.upstream, None
            lost = list(self.outstanding.values())
            self.outstanding.clear()
        if up is not None:
            try:
                up.close()
            except OSError:
                pass
        for h in lost:
            try:
                self._fail(h)
            except OSError:
                break

    def _pump_upstream(self, up: socket.socket) -> None:
        try:
            while True:
                h, raw = wire.read_raw_frame(up)
                with self.lock:
                    self.outstanding.pop(h.request_id, None)
                self.send(raw)
        except (wire.ConnectionClosed, FrameError, OSError):
            pass
        if not self.closed.is_set():
            self._upstream_lost()

    def run(self) -> None:
        pump = None
        if self.upstream is not None:
            pump = threading.Thread(target=self._pump_upstream, args=(self.upstream,),
                                    daemon=True, name=f"{self.target.name}-relay")
            pump.start()
        try:
            while not self.closed.is_set():
                try:
                    h, raw = wire.read_raw_frame(self.sock)
                except FrameError as exc:
                    self.send(_error_response_for(exc.header))
                    break
                with self.lock:
                    up = self.upstream
                    if up is not None:
                        self.outstanding[h.request_id] = h
                if up is None:
                    self._fail(h)
                    continue
                try:
                    up.sendall(raw)
                except OSError:
                    self._upstream_lost()
        except (wire.ConnectionClosed, OSError):
            pass
        finally:
            self.closed.set()
            with self.lock:
                up, self.upstream = self.upstream, None
            if up is not None:
                try:
                    up.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                up.close()
            if pump is not None:
                pump.join()
            self.sock.close()


class BlockTarget:
    """Serve one device (PROCESSED) or relay to an upstream target (PASSTHROUGH)."""

    def __init__(self, listen, mode=TargetMode.PROCESSED, device: Optional[BlockDevice] = None,
                 reactor=None, upstream=None, depth: int = 128,
                 upstream_timeout: float = 5.0, name: Optional[str] = None):
        self.mode = TargetMode(mode)
        self.listen = parse_endpoint(listen)
        self.device = device
        self.reactor = reactor
        self.upstream = parse_endpoint(upstream) if upstream is not None else None
        self.depth = depth
        self.upstream_timeout = upstream_timeout
        self.name = name or f"target-{self.mode.value}"
        if self.mode is TargetMode.PROCESSED and (device is None or reactor is None):
            raise ValidationError("PROCESSED target needs a device and a reactor")
        if self.mode is TargetMode.PASSTHROUGH and self.upstream is None:
            raise ValidationError("PASSTHROUGH target needs an upstream endpoint")
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self._conns: list = []
        self._conn_threads: list = []
        self._lock = threading.Lock()

    @property
    def address(self) -> tuple:
        return self._sock.getsockname()[:2] if self._sock else self.listen

    @property
    def endpoint(self) -> str:
        return format_endpoint(self.address)

    def start(self) -> "BlockTarget":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(self.listen)
            sock.listen(64)
        except OSError:
            sock.close()
            raise
        sock.settimeout(0.1)
        self._sock = sock
        self._thread = threading.Thread(target=self._accept_loop, daemon=True,
                                        name=f"{self.name}-accept")
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            cls = _ProcessedConnection if self.mode is TargetMode.PROCESSED else _RelayConnection
            handler = cls(self, conn)
            t = threading.Thread(target=handler.run, daemon=True, name=f"{self.name}-conn")
            with self._lock:
                self._conns.append(handler)
                self._conn_threads.append(t)
            t.start()

    def stop(self, timeout: float = 5.0) -> None:
        self._stopping.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None
        if self._sock is not None:
            self._sock.close()
        with self._lock:
            conns, threads = list(self._conns), list(self._conn_threads)
            self._conns.clear()
            self._conn_threads.clear()
        for c in conns:
            c.close()
        for t in threads:
            t.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(endpoint, cfg_mode, device=None, reactor=None, upstream=None,
          stop_event: Optional[threading.Event] = None, **kwargs) -> None:
    """Run a target in the calling thread until ``stop_event`` is set."""
    target = BlockTarget(endpoint, cfg_mode, device=device, reactor=reactor,
                         upstream=upstream, **kwargs).start()
    stop_event = stop_event or threading.Event()
    try:
        stop_event.wait()
    finally:
        target.stop()


class BlockClient:
    """Pipelined client: many requests in flight, responses matched by id."""

    def __init__(self, endpoint, timeout: float = 5.0, connect: bool = True):
        self.endpoint = parse_endpoint(endpoint)
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        self._pending: dict[int, Future] = {}
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._reader: Optional[threading.Thread] = None
        self.failure: Optional[str] = None
        self.orphans = 0
        self.geometry: Optional[DeviceGeometry] = None
        if connect:
            self.connect()

    def connect(self) -> "BlockClient":
        sock = socket.create_connection(self.endpoint, timeout=self.timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.failure = None
        self._reader = threading.Thread(target=self._read_loop, args=(sock,), daemon=True,
                                        name="block-client-reader")
        self._reader.start()
        return self

    def _read_loop(self, sock) -> None:
        reason = "connection closed"
        try:
            while True:
                f = wire.read_frame(sock)
                with self._lock:
                    fut = self._pending.pop(f.request_id, None)
                if fut is None:
                    self.orphans += 1
                    log.warning("orphan response for request %d", f.request_id)
                    continue
                fut.set_result(f)
        except wire.ConnectionClosed:
            pass
        except (FrameError, OSError) as exc:
            reason = f"{type(exc).__name__}: {exc}"
        self._fail_all(reason)

    def _fail_all(self, reason: str) -> None:
        with self._lock:
            self.failure = reason
            pending, self._pending = self._pending, {}
        for rid, fut in pending.items():
            if not fut.done():
                fut.set_result(Frame(Opcode.INFO, rid, status=Status.IO_ERROR, response=True))

    def next_id(self) -> int:
        return next(self._ids)

    def submit(self, opcode, offset: int = 0, length: int = 0, payload: bytes = b"",
               request_id: Optional[int] = None) -> Future:
        rid = self.next_id() if request_id is None else request_id
        frame = wire.request(opcode, rid, offset, length, payload)
        fut: Future = Future()
        fut.request_id = rid
        try:
            data = wire.encode_frame(frame)
        except SizeLimitExceeded:
            fut.set_result(Frame(frame.opcode, rid, status=Status.SIZE_LIMIT, response=True))
            return fut
        with self._lock:
            if self.failure is not None or self.sock is None:
                fut.set_result(Frame(frame.opcode, rid, status=Status.IO_ERROR, response=True))
                return fut
            self._pending[rid] = fut
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            self._fail_all(f"send failed: {exc}")
        return fut

    def wait(self, fut: Future, timeout: Optional[float] = None) -> Frame:
        try:
            return fut.result(self.timeout if timeout is None else timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(fut.request_id, None)
            return Frame(Opcode.INFO, fut.request_id, status=Status.IO_ERROR, response=True,
                         payload=b"")

    def call(self, opcode, offset=0, length=0, payload=b"", timeout=None) -> Frame:
        return self.wait(self.submit(opcode, offset, length, payload), timeout)

    def info(self) -> DeviceGeometry:
        f = self.call(Opcode.INFO)
        if f.status is not Status.OK:
            raise DeviceIOError(f"INFO failed with {f.status.name}")
        self.geometry = wire.parse_info(f.payload)
        return self.geometry

    def read(self, offset: int, length: int) -> Frame:
        return self.call(Opcode.READ, offset, length)

    def write(self, offset: int, data: bytes) -> Frame:
        return self.call(Opcode.WRITE, offset, len(data), data)

    def flush(self) -> Frame:
        return self.call(Opcode.FLUSH)

    def io(self, req: IORequest, timeout: Optional[float] = None) -> IOCompletion:
        """Run one block-addressed request against the remote device."""
        if self.geometry is None:
            self.info()
        bs = self.geometry.block_size
        t0 = time.perf_counter_ns()
        if req.op is Op.FLUSH:
            fut = self.submit(Opcode.FLUSH, request_id=req.request_id)
        elif req.op is Op.READ:
            fut = self.submit(Opcode.READ, req.lba * bs, req.num_blocks * bs,
                              request_id=req.request_id)
        else:
            fut = self.submit(Opcode.WRITE, req.lba * bs, payload=req.payload,
                              request_id=req.request_id)
        f = self.wait(fut, timeout)
        detail = None
        if f.status is Status.IO_ERROR and not fut.done():
            detail = "timeout"
        elif f.status is Status.IO_ERROR and self.failure:
            detail = self.failure
        return IOCompletion(req.request_id, f.status, f.payload,
                            time.perf_counter_ns() - t0, detail)

    def close(self) -> None:
        sock, self.sock = self.sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        if self._reader is not None:
            self._reader.join(2.0)
            self._reader = None
        self._fail_all("client closed")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_io(endpoint, req: IORequest, timeout: float = 5.0) -> IOCompletion:
    """One-shot request over a fresh connection."""
    try:
        client = BlockClient(endpoint, timeout=timeout)
    except OSError as exc:
        return IOCompletion(req.request_id, Status.IO_ERROR, detail=f"connect failed: {exc}")
    with client:
        return client.io(req, timeout)


_STATUS_ERRORS = {
    Status.IO_ERROR: DeviceIOError,
    Status.OUT_OF_RANGE: OutOfRange,
    Status.UNSUPPORTED: UnsupportedIO,
    Status.SIZE_LIMIT: SizeLimitExceeded,
}


class RemoteDevice(BlockDevice):
    """A device living behind a target; usable as a base for virtual devices."""

    kind = DeviceKind.REMOTE

    def __init__(self, device_id: str, endpoint, timeout: float = 5.0):
        self.client = BlockClient(endpoint, timeout=timeout)
        try:
            geometry = self.client.info()
        except Exception:
            self.client.close()
            raise
        super().__init__(device_id, geometry)
        self.endpoint = format_endpoint(self.client.endpoint)

    def _check(self, f: Frame) -> Frame:
        if f.status is Status.OK:
            return f
        if f.status is Status.PARITY_MISMATCH:
            raise ParityMismatch("remote parity check failed", payload=f.payload)
        raise _STATUS_ERRORS.get(f.status, DeviceError)(
            f"remote {self.endpoint} returned {f.status.name}")

    def read_blocks(self, lba, num_blocks):
        bs = self.block_size
        return self._check(self.client.read(lba * bs, num_blocks * bs)).payload

    def write_blocks(self, lba, data):
        self._check(self.client.write(lba * self.block_size, bytes(data)))

    def flush(self):
        self._check(self.client.flush())

    def close(self):
        self.client.close()
