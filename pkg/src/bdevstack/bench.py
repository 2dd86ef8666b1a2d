"""fio-style workload generator and latency statistics.

Each worker thread keeps ``io_depth`` bench requests outstanding against its
own channel (local device) or connection (remote target) for
``runtime_seconds``. A bench request larger than the 128 KiB device ceiling is
split into several device I/Os; its latency runs from the first piece's
submission to the last piece's completion, measured in the bench process.
"""

from __future__ import annotations

import enum
import gc
import gzip
import json
import math
import os
import queue
import random
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .blockcore import MAX_IO_BYTES, IORequest, Op, Status, ValidationError
from .export import BlockClient
from .wire import Opcode

MAX_BENCH_BS = 1 << 20


class Pattern(enum.Enum):
    SEQ_READ = "read"
    SEQ_WRITE = "write"
    RAND_READ = "randread"
    RAND_WRITE = "randwrite"

    @property
    def is_read(self) -> bool:
        return self in (Pattern.SEQ_READ, Pattern.RAND_READ)

    @property
    def is_random(self) -> bool:
        return self in (Pattern.RAND_READ, Pattern.RAND_WRITE)


class Fill(enum.Enum):
    ZERO = "zero"
    RANDOM = "random"
    TEXT_CORPUS = "text"


@dataclass
class WorkloadSpec:
    target: str
    pattern: Pattern = Pattern.SEQ_READ
    block_size_bytes: int = MAX_BENCH_BS
    io_depth: int = 32
    threads: int = 1
    runtime_seconds: float = 5.0
    rng_seed: int = 0
    data_fill: Fill = Fill.ZERO
    span_bytes: Optional[int] = None
    corpus_path: Optional[str] = None
    # like timeit: keep cyclic GC pauses out of the timed window
    disable_gc: bool = True

    def __post_init__(self):
        self.pattern = Pattern(self.pattern)
        self.data_fill = Fill(self.data_fill)
        if not 0 < self.block_size_bytes <= MAX_BENCH_BS:
            raise ValidationError(f"bench block size must be in 1..{MAX_BENCH_BS} bytes")
        if self.io_depth < 1 or self.threads < 1:
            raise ValidationError("io_depth and threads must be >= 1")
        if self.runtime_seconds < 0:
            raise ValidationError("runtime must be non-negative")


@dataclass
class Stats:
    count: int = 0
    mean: float = 0.0
    p50: int = 0
    p99: int = 0
    max: int = 0
    empty: bool = True


def _nearest_rank(sorted_values, pct: float):
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def compute_stats(latencies) -> Stats:
    values = sorted(latencies)
    if not values:
        return Stats()
    return Stats(len(values), sum(values) / len(values), _nearest_rank(values, 50),
                 _nearest_rank(values, 99), values[-1], False)


@dataclass
class ThreadReport:
    thread: int
    total_bytes: int
    submitted: int
    completed: int
    failed: int
    elapsed_s: float
    latency_ns: Stats


@dataclass
class BenchReport:
    target: str
    pattern: str
    block_size_bytes: int
    io_depth: int
    threads: int
    total_bytes: int
    elapsed_s: float
    throughput_bps: float
    latency_ns: Stats
    status_counts: dict
    submitted: int
    completed: int
    failed: int
    per_thread: list = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(k == Status.OK.name for k, v in self.status_counts.items() if v)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- access sequence ---------------------------------------------------------

def offset_trace(spec: WorkloadSpec, span_bytes: int, thread_index: int):
    """Infinite generator of request offsets for one worker thread."""
    bs = spec.block_size_bytes
    slots = span_bytes // bs
    if slots < 1:
        raise ValidationError(f"target of {span_bytes} bytes is smaller than bs={bs}")
    if spec.pattern.is_random:
        rng = random.Random(spec.rng_seed * 1000003 + thread_index)
        while True:
            yield rng.randrange(slots) * bs
    else:
        i = 0
        while True:
            yield (i % slots) * bs
            i += 1


def _fill_buffer(spec: WorkloadSpec, size: int) -> bytes:
    if spec.data_fill is Fill.ZERO:
        return bytes(size)
    if spec.data_fill is Fill.RANDOM:
        return random.Random(spec.rng_seed).randbytes(size)
    path = spec.corpus_path or default_corpus_path()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        text = f.read()
    reps = -(-size // len(text))
    return (text * reps)[:size]


def default_corpus_path() -> str:
    env = os.environ.get("BDEVSTACK_CORPUS")
    if env:
        return env
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(here, "data", "english_corpus.txt.gz")


# -- targets -----------------------------------------------------------------

class _LocalTarget:
    def __init__(self, device, reactor, depth):
        self.channel = reactor.create_channel(device, depth)
        self.block_size = device.block_size
        self.capacity = device.geometry.capacity

    def submit(self, op, offset, payload, length):
        bs = self.block_size
        if op is Op.READ:
            req = IORequest(Op.READ, offset // bs, length // bs)
        else:
            req = IORequest(Op.WRITE, offset // bs, length // bs, payload)
        return self.channel.submit(req)

    def next_completion(self, timeout):
        c = self.channel.get(timeout)
        if c is None:
            return None
        return c.request_id, c.status

    def close(self):
        for _ in self.channel.poll():
            pass
        self.channel.close()


class _RemoteTarget:
    def __init__(self, endpoint, timeout=10.0):
        self.client = BlockClient(endpoint, timeout=timeout)
        geometry = self.client.info()
        self.block_size = geometry.block_size
        self.capacity = geometry.capacity
        self._done = queue.SimpleQueue()

    def submit(self, op, offset, payload, length):
        if op is Op.READ:
            fut = self.client.submit(Opcode.READ, offset, length)
        else:
            fut = self.client.submit(Opcode.WRITE, offset, payload=payload)
        rid = fut.request_id
        fut.add_done_callback(lambda f, rid=rid: self._done.put((rid, f.result().status)))
        return rid

    def next_completion(self, timeout):
        try:
            return self._done.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        self.client.close()


# -- workers -----------------------------------------------------------------

def _pieces(offset: int, length: int, limit: int):
    end = offset + length
    while offset < end:
        n = min(limit, end - offset)
        yield offset, n
        offset += n


def _worker(spec: WorkloadSpec, target, thread_index: int, span: int, data: bytes,
            start_barrier: threading.Barrier, out: dict) -> None:
    bs = spec.block_size_bytes
    op = Op.READ if spec.pattern.is_read else Op.WRITE
    piece_limit = min(MAX_IO_BYTES, bs)
    piece_limit -= piece_limit % target.block_size
    offsets = offset_trace(spec, span, thread_index)
    latencies = []
    status_counts: dict = {}
    outstanding: dict = {}   # bench request index -> [pieces left, t0, worst status]
    piece_owner: dict = {}   # device/wire request id -> bench request index
    submitted = completed = failed = total_bytes = 0
    next_index = 0
    view = memoryview(data)

    start_barrier.wait()
    t_start = time.perf_counter()
    deadline = t_start + spec.runtime_seconds
    while True:
        now = time.perf_counter()
        while len(outstanding) < spec.io_depth and now < deadline:
            off = next(offsets)
            idx = next_index
            next_index += 1
            pieces = list(_pieces(off, bs, piece_limit))
            outstanding[idx] = [len(pieces), time.perf_counter_ns(), Status.OK]
            submitted += 1
            for p_off, p_len in pieces:
                payload = view[p_off - off:p_off - off + p_len].tobytes() if op is Op.WRITE else b""
                rid = target.submit(op, p_off, payload, p_len)
                piece_owner[rid] = idx
        if not outstanding:
            break
        res = target.next_completion(timeout=5.0)
        if res is None:
            raise RuntimeError(f"bench thread {thread_index}: no completion within 5 s")
        rid, status = res
        idx = piece_owner.pop(rid)
        entry = outstanding[idx]
        entry[0] -= 1
        if status is not Status.OK:
            entry[2] = status
        if entry[0] == 0:
            del outstanding[idx]
            latencies.append(time.perf_counter_ns() - entry[1])
            status_counts[entry[2].name] = status_counts.get(entry[2].name, 0) + 1
            completed += 1
            if entry[2] is Status.OK:
                total_bytes += bs
            else:
                failed += 1
    elapsed = time.perf_counter() - t_start
    out[thread_index] = dict(latencies=latencies, status_counts=status_counts,
                             submitted=submitted, completed=completed, failed=failed,
                             total_bytes=total_bytes, elapsed=elapsed)


def _is_endpoint(target: str) -> bool:
    host, sep, port = target.rpartition(":")
    return bool(sep) and port.isdigit()


def run_workload(spec: WorkloadSpec, registry=None, reactor=None) -> BenchReport:
    """Run ``spec`` and return its report.

    ``spec.target`` is either ``host:port`` (remote target, one connection per
    thread) or the id of a device in ``registry``.
    """
    return _merge(spec, _run(spec, registry, reactor))


def _run(spec: WorkloadSpec, registry=None, reactor=None) -> dict:
    remote = _is_endpoint(spec.target)
    targets = []
    started_reactor = None
    try:
        if remote:
            for _ in range(spec.threads):
                targets.append(_RemoteTarget(spec.target))
        else:
            if registry is None:
                raise ValidationError(f"local target {spec.target!r} needs a registry")
            device = registry.get(spec.target)
            reactor = reactor or registry.reactor
            if not reactor.running:
                reactor.start()
                started_reactor = reactor
            pieces = -(-spec.block_size_bytes // MAX_IO_BYTES)
            for _ in range(spec.threads):
                targets.append(_LocalTarget(device, reactor, spec.io_depth * pieces))
        capacity = targets[0].capacity
        span = min(spec.span_bytes or capacity, capacity)
        if spec.block_size_bytes % targets[0].block_size:
            raise ValidationError(
                f"bs={spec.block_size_bytes} is not a multiple of the device block size "
                f"{targets[0].block_size}")
        data = b"" if spec.pattern.is_read else _fill_buffer(spec, spec.block_size_bytes)
        barrier = threading.Barrier(spec.threads)
        results: dict = {}
        errors: list = []

        def run(i):
            try:
                _worker(spec, targets[i], i, span, data, barrier, results)
            except Exception as exc:  # surfaced after join
                errors.append(exc)
                barrier.abort()

        threads = [threading.Thread(target=run, args=(i,), name=f"bench-{i}")
                   for i in range(spec.threads)]
        gc_was_enabled = gc.isenabled()
        if spec.disable_gc:
            gc.disable()
        try:
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        finally:
            if gc_was_enabled:
                gc.enable()
        if errors:
            raise errors[0]
    finally:
        for t in targets:
            t.close()
        if started_reactor is not None:
            started_reactor.stop()
    return results


def _accumulate(into: dict, results: dict) -> None:
    for i, r in results.items():
        acc = into.setdefault(i, dict(latencies=[], status_counts={}, submitted=0, completed=0,
                                      failed=0, total_bytes=0, elapsed=0.0))
        acc["latencies"].extend(r["latencies"])
        for k, v in r["status_counts"].items():
            acc["status_counts"][k] = acc["status_counts"].get(k, 0) + v
        for k in ("submitted", "completed", "failed", "total_bytes", "elapsed"):
            acc[k] += r[k]


def _merge(spec: WorkloadSpec, results: dict) -> BenchReport:
    all_lat = []
    counts: dict = {}
    per_thread = []
    for i in sorted(results):
        r = results[i]
        all_lat.extend(r["latencies"])
        for k, v in r["status_counts"].items():
            counts[k] = counts.get(k, 0) + v
        per_thread.append(ThreadReport(i, r["total_bytes"], r["submitted"], r["completed"],
                                       r["failed"], r["elapsed"], compute_stats(r["latencies"])))
    total = sum(r["total_bytes"] for r in results.values())
    elapsed = max((r["elapsed"] for r in results.values()), default=0.0)
    return BenchReport(
        target=spec.target, pattern=spec.pattern.value, block_size_bytes=spec.block_size_bytes,
        io_depth=spec.io_depth, threads=spec.threads, total_bytes=total, elapsed_s=elapsed,
        throughput_bps=total / elapsed if elapsed > 0 else 0.0,
        latency_ns=compute_stats(all_lat), status_counts=counts,
        submitted=sum(r["submitted"] for r in results.values()),
        completed=sum(r["completed"] for r in results.values()),
        failed=sum(r["failed"] for r in results.values()),
        per_thread=per_thread)


@dataclass
class Comparison:
    a: BenchReport
    b: BenchReport

    @property
    def throughput_ratio(self) -> float:
        return self.b.throughput_bps / self.a.throughput_bps if self.a.throughput_bps else math.inf

    @property
    def latency_ratio(self) -> float:
        return self.b.latency_ns.mean / self.a.latency_ns.mean if self.a.latency_ns.mean else math.inf

    def to_dict(self) -> dict:
        return {"a": self.a.to_dict(), "b": self.b.to_dict(),
                "throughput_ratio": self.throughput_ratio, "latency_ratio": self.latency_ratio}


def compare_paths(spec_a: WorkloadSpec, spec_b: WorkloadSpec, registry=None,
                  rounds: int = 4) -> Comparison:
    """Run both workloads and report them side by side.

    Each spec's runtime is cut into ``rounds`` slices that alternate A, B, A,
    B, ... so slow drift on a shared machine lands on both paths alike. Every
    slice restarts from the workload's seed.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    acc_a: dict = {}
    acc_b: dict = {}
    slice_a = replace(spec_a, runtime_seconds=spec_a.runtime_seconds / rounds)
    slice_b = replace(spec_b, runtime_seconds=spec_b.runtime_seconds / rounds)
    for _ in range(rounds):
        _accumulate(acc_a, _run(slice_a, registry))
        _accumulate(acc_b, _run(slice_b, registry))
    return Comparison(_merge(spec_a, acc_a), _merge(spec_b, acc_b))


def format_report(r: BenchReport) -> str:
    lat = r.latency_ns
    counts = " ".join(f"{k}={v}" for k, v in sorted(r.status_counts.items())) or "-"
    return (f"{r.pattern} bs={r.block_size_bytes} qd={r.io_depth} threads={r.threads}: "
            f"{r.throughput_bps / 1e6:.1f} MB/s over {r.elapsed_s:.2f} s, "
            f"lat mean={lat.mean / 1e3:.1f}us p50={lat.p50 / 1e3:.1f}us "
            f"p99={lat.p99 / 1e3:.1f}us max={lat.max / 1e3:.1f}us, status {counts}")
