"""Command-line entry point.

Exit codes: 0 success, 1 failed checks or runtime error, 2 configuration
error, 3 startup error.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import signal
import sys
import threading

from . import wire
from .bench import Fill, Pattern, WorkloadSpec, format_report, run_workload
from .blockcore import StackError, Status, ValidationError
from .config import ConfigError, StartupError, build_stack, load_config
from .export import BlockClient
from .wire import Opcode

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_STARTUP = 3

LISTEN_ENV = "BDEVSTACK_LISTEN"

_SUFFIX = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str) -> int:
    t = text.strip().lower().rstrip("b").rstrip("i")
    if t and t[-1] in _SUFFIX:
        return int(float(t[:-1]) * _SUFFIX[t[-1]])
    return int(t)


def _load(path):
    spec = load_config(path)
    override = os.environ.get(LISTEN_ENV)
    return spec, override


def cmd_serve(args) -> int:
    spec, override = _load(args.config)
    listen = args.listen or override
    if listen:
        if not spec.exports:
            raise ConfigError(f"--listen/{LISTEN_ENV} given but the config has no exports")
        spec.exports[0].listen = listen
    stack = build_stack(spec)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        for d in stack.registry:
            g = d.geometry
            print(f"device {d.device_id}: {d.kind.value} {g.block_size} x {g.block_count}")
        for t in stack.targets:
            what = t.device.device_id if t.device is not None else f"-> {t.upstream[0]}:{t.upstream[1]}"
            print(f"serving {t.mode.value} {what} on {t.endpoint}", flush=True)
        stop.wait(args.duration)
    finally:
        stack.shutdown()
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = WorkloadSpec(
        target=args.target, pattern=Pattern(args.rw), block_size_bytes=parse_size(args.bs),
        io_depth=args.iodepth, threads=args.threads, runtime_seconds=args.runtime,
        rng_seed=args.seed, data_fill=Fill(args.fill),
        span_bytes=parse_size(args.span) if args.span else None)
    stack = None
    registry = None
    if args.config:
        stack = build_stack(load_config(args.config))
        registry = stack.registry
    try:
        report = run_workload(spec, registry=registry, reactor=stack.reactor if stack else None)
    finally:
        if stack is not None:
            stack.shutdown()
    print(format_report(report))
    if args.json_out:
        with open(args.json_out, "w") as f:
            f.write(report.to_json())
    return EXIT_OK


def _read_capture(path: str, binary: bool) -> bytes:
    if path == "-":
        data = sys.stdin.buffer.read()
    else:
        with open(path, "rb") as f:
            data = f.read()
    if binary:
        return data
    lines = []
    for line in data.decode("ascii", "replace").splitlines():
        lines.append(line.split("#", 1)[0])
    return bytes.fromhex("".join(lines))


def describe_frame(f: wire.Frame) -> str:
    kind = "response" if f.response else "request"
    parts = [f"{f.opcode.name} {kind} id={f.request_id} offset={f.offset} length={f.length}"]
    if f.response:
        parts.append(f"status={f.status.name}")
    if f.payload:
        if f.opcode == Opcode.INFO and f.response:
            g = wire.parse_info(f.payload)
            parts.append(f"block_size={g.block_size} block_count={g.block_count}")
        else:
            preview = f.payload[:16].hex(" ")
            more = " ..." if len(f.payload) > 16 else ""
            parts.append(f"payload[{len(f.payload)}]={preview}{more}")
    return " ".join(parts)


def cmd_frame_dump(args) -> int:
    data = _read_capture(args.capture, args.binary)
    try:
        frames = wire.decode_stream(data)
    except wire.FrameError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for i, f in enumerate(frames):
        print(f"[{i}] {describe_frame(f)}")
    return EXIT_OK


def _verify_checks(client: BlockClient, allow_write: bool, seed: int):
    geometry = client.info()
    bs, count = geometry.block_size, geometry.block_count
    yield "info", True, f"block_size={bs} block_count={count}"

    f = client.read(0, bs)
    ok = f.status in (Status.OK, Status.PARITY_MISMATCH) and len(f.payload) == bs
    yield "read block 0", ok, f.status.name

    f = client.read(count * bs, bs)
    yield "read past end -> OUT_OF_RANGE", f.status is Status.OUT_OF_RANGE, f.status.name

    f = client.read(1, bs)
    yield "misaligned read -> UNSUPPORTED", f.status is Status.UNSUPPORTED, f.status.name

    n = min(32, count)
    futs = [client.submit(Opcode.READ, (i % count) * bs, bs) for i in range(n)]
    got = [client.wait(fu) for fu in futs]
    ids_ok = sorted(g.request_id for g in got) == sorted(fu.request_id for fu in futs)
    yield f"{n} pipelined reads correlate", ids_ok and client.orphans == 0, f"orphans={client.orphans}"

    if allow_write:
        rng = random.Random(seed)
        lba = rng.randrange(count)
        data = rng.randbytes(bs)
        w = client.write(lba * bs, data)
        if w.status is Status.UNSUPPORTED:
            yield "single-block write round trip", True, "target rejects partial writes (UNSUPPORTED)"
        else:
            r = client.read(lba * bs, bs)
            ok = w.status is Status.OK and r.status is Status.OK and r.payload == data
            yield "single-block write round trip", ok, f"write={w.status.name} read={r.status.name}"


def cmd_verify(args) -> int:
    failed = 0
    with BlockClient(args.target, timeout=args.timeout) as client:
        for name, ok, info in _verify_checks(client, args.write, args.seed):
            print(f"{'PASS' if ok else 'FAIL'} {name}: {info}")
            failed += not ok
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdevstack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a stack from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--listen", help=f"override the first export's address (env {LISTEN_ENV})")
    s.add_argument("--duration", type=float, default=None,
                   help="stop after this many seconds (default: until interrupted)")
    s.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="run an fio-style workload")
    b.add_argument("--target", required=True, help="host:port, or a device id from --config")
    b.add_argument("--config", help="stack config for local device targets")
    b.add_argument("--rw", default="read", choices=[x.value for x in Pattern])
    b.add_argument("--bs", default="1M")
    b.add_argument("--iodepth", type=int, default=32)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--runtime", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--fill", default="zero", choices=[x.value for x in Fill])
    b.add_argument("--span", help="limit the I/O region (e.g. 64M)")
    b.add_argument("--json-out")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("frame-dump", help="decode a captured frame stream")
    d.add_argument("capture", help="hex dump file ('#' comments allowed), or '-' for stdin")
    d.add_argument("--binary", action="store_true", help="capture is raw bytes, not hex")
    d.set_defaults(func=cmd_frame_dump)

    v = sub.add_parser("verify", help="run protocol and device checks against a live target")
    v.add_argument("--target", required=True)
    v.add_argument("--write", action="store_true", help="also run a destructive write check")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--timeout", type=float, default=5.0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StartupError as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    except (StackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
