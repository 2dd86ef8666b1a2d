"""Polled-mode I/O engine.

A ``Reactor`` owns a set of devices and spins over its ``IOChannel``s, moving
queued requests into device logic and completions into per-channel completion
queues. Producers on any thread call ``IOChannel.submit``; the submitter
reaps results with ``poll`` / ``get``. A channel admits at most ``depth``
requests that have been accepted but not yet completed, and blocks further
submitters until the reactor finishes one.

Idle behaviour: by default the loop keeps polling and only hands the GIL to
other threads between empty passes. ``idle_yield=True`` instead parks the
loop on an event (woken by the next submission) after an empty pass, which
keeps a shared desk machine responsive.
"""

from __future__ import annotations

import collections
import itertools
import queue
import threading
import time
from typing import Callable, Optional

from .blockcore import (
    BlockDevice,
    DeviceError,
    IOCompletion,
    IORequest,
    Status,
)


class EngineError(Exception):
    pass


class QueueFull(EngineError):
    """Raised by a non-blocking submit when the channel is at its depth limit."""


_channel_ids = itertools.count()


class IOChannel:
    def __init__(self, reactor: "Reactor", device: BlockDevice, depth: int):
        if depth < 1:
            raise EngineError(f"channel depth must be >= 1, got {depth}")
        self.reactor = reactor
        self.device = device
        self.depth = depth
        self.channel_id = next(_channel_ids)
        self._sq: collections.deque = collections.deque()
        self._cq: queue.SimpleQueue = queue.SimpleQueue()
        self._slots = threading.Semaphore(depth)
        self._lock = threading.Lock()
        self.inflight = 0
        self.max_inflight = 0
        self.submitted = 0
        self.completed = 0
        self.closed = False

    def __repr__(self):
        return f"<IOChannel {self.channel_id} {self.device.device_id} depth={self.depth}>"

    def submit(self, req: IORequest, block: bool = True, timeout: Optional[float] = None,
               callback: Optional[Callable[[IOCompletion], None]] = None) -> int:
        """Accept ``req`` and return its request id.

        Malformed requests raise ``ValidationError`` before a slot is taken.
        Out-of-range requests complete immediately with ``OUT_OF_RANGE``.
        If ``callback`` is given it runs on the reactor thread with the
        completion instead of the completion being queued for ``poll``.
        """
        if self.closed:
            raise EngineError(f"{self!r} is closed")
        self.device.validate(req)
        if not self._slots.acquire(block, timeout):
            raise QueueFull(f"{self!r} has {self.depth} requests in flight")
        with self._lock:
            self.inflight += 1
            self.submitted += 1
            if self.inflight > self.max_inflight:
                self.max_inflight = self.inflight
        t0 = time.perf_counter_ns()
        status = self.device.precheck(req)
        if status is not None:
            self._deliver(IOCompletion(req.request_id, status,
                                       submit_to_complete_ns=time.perf_counter_ns() - t0,
                                       detail="rejected at submission"), callback)
        else:
            self._sq.append((req, t0, callback))
            self.reactor.wake()
        return req.request_id

    def try_submit(self, req: IORequest, callback=None) -> bool:
        try:
            self.submit(req, block=False, callback=callback)
        except QueueFull:
            return False
        return True

    def _deliver(self, completion: IOCompletion, callback) -> None:
        try:
            if callback is None:
                self._cq.put(completion)
            else:
                callback(completion)
        finally:
            self._release()

    def _release(self) -> None:
        with self._lock:
            self.inflight -= 1
            self.completed += 1
        self._slots.release()

    def poll(self, max_completions: Optional[int] = None) -> list:
        """Return the completions that are ready, without blocking."""
        out = []
        while max_completions is None or len(out) < max_completions:
            try:
                c = self._cq.get_nowait()
            except queue.Empty:
                break
            out.append(c)
        return out

    def get(self, timeout: Optional[float] = None) -> Optional[IOCompletion]:
        """Block until one completion is ready; None on timeout."""
        try:
            c = self._cq.get(timeout=timeout)
        except queue.Empty:
            return None
        return c

    def pending(self) -> int:
        return len(self._sq)

    def process(self, budget: int) -> int:
        """Run up to ``budget`` queued requests through the device. Reactor thread only."""
        done = 0
        sq = self._sq
        device = self.device
        while done < budget and sq:
            req, t0, callback = sq.popleft()
            try:
                c = device.execute(req)
            except DeviceError as exc:
                c = IOCompletion(req.request_id, exc.status, detail=str(exc))
            except Exception as exc:  # device bug: fail the request, keep the reactor alive
                c = IOCompletion(req.request_id, Status.IO_ERROR,
                                 detail=f"{type(exc).__name__}: {exc}")
            c.submit_to_complete_ns = time.perf_counter_ns() - t0
            self._deliver(c, callback)
            done += 1
        return done

    def close(self) -> None:
        self.closed = True
        self.reactor.remove_channel(self)


class Reactor:
    def __init__(self, poll_budget: int = 64, idle_yield: bool = False,
                 idle_wait: float = 0.001, name: str = "reactor"):
        if poll_budget < 1:
            raise EngineError("poll_budget must be positive")
        self.poll_budget = poll_budget
        self.idle_yield = idle_yield
        self.idle_wait = idle_wait
        self.name = name
        self._channels: list[IOChannel] = []
        self._lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.running = False
        self.iterations = 0

    @property
    def channels(self) -> list:
        return list(self._channels)

    def _pin(self, device: BlockDevice) -> None:
        owner = device.reactor
        if owner is not None and owner is not self:
            raise EngineError(f"device {device.device_id!r} is pinned to reactor {owner.name!r}")
        device.reactor = self
        for base in device.bases:
            self._pin(base)

    def create_channel(self, device: BlockDevice, depth: int = 32) -> IOChannel:
        if device is None:
            raise EngineError("cannot create a channel for an unregistered device")
        with self._lock:
            self._pin(device)
            ch = IOChannel(self, device, depth)
            self._channels = self._channels + [ch]
        return ch

    def remove_channel(self, ch: IOChannel) -> None:
        with self._lock:
            self._channels = [c for c in self._channels if c is not ch]

    def wake(self) -> None:
        if self.idle_yield:
            self._wake.set()

    def run_once(self) -> int:
        """One pass over every channel; returns the number of requests processed."""
        work = 0
        budget = self.poll_budget
        for ch in self._channels:
            if ch._sq:
                work += ch.process(budget)
        self.iterations += 1
        return work

    def run(self) -> None:
        """Poll until ``stop`` is called, then drain whatever is still queued."""
        self.running = True
        sleep = time.sleep
        try:
            while not self._stop.is_set():
                if self.run_once():
                    continue
                if self.idle_yield:
                    self._wake.wait(self.idle_wait)
                    self._wake.clear()
                else:
                    sleep(0)
            while self.run_once():
                pass
        finally:
            self.running = False

    def start(self) -> "Reactor":
        if self._thread is not None:
            raise EngineError(f"reactor {self.name!r} already started")
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name=self.name, daemon=True)
        self._thread.start()
        while not self.running and self._thread.is_alive():
            time.sleep(0.0005)
        return self

    def stop(self, timeout: Optional[float] = 5.0) -> None:
        self._stop.set()
        self._wake.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
