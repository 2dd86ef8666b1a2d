"""Compare the compiled and pure-Python XOR kernels.

Times ``xor_blocks`` over stripes of several widths and block sizes, plus an
end-to-end RAID5 full-stripe write + safe_read loop with each backend swapped
into the parity path.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import random
import sys
import timeit

from bdevstack import _xorpy, raid
from bdevstack.backstores import MemoryDevice
from bdevstack.blockcore import DeviceGeometry

try:
    from bdevstack import _xorcore
except ImportError:  # extension not built
    _xorcore = None


def time_xor(impl, width, bs, repeat):
    rng = random.Random(width * bs)
    blocks = [rng.randbytes(bs) for _ in range(width)]
    number = max(1, (1 << 22) // (width * bs))
    best = min(timeit.repeat(lambda: impl.xor_blocks(blocks), number=number, repeat=repeat))
    return width * bs * number / best


def time_raid(impl, repeat):
    bases = [MemoryDevice(f"m{i}", DeviceGeometry(4096, 64)) for i in range(4)]
    r5 = raid.RaidDevice("r5", bases, "raid5")
    data = random.Random(0).randbytes(3 * 4096)
    saved = raid.kernels.xor_blocks
    raid.kernels.xor_blocks = impl.xor_blocks
    try:
        def loop():
            for s in range(64):
                r5.full_stripe_write(s, data)
            for lba in range(192):
                r5.safe_read(lba)
        best = min(timeit.repeat(loop, number=1, repeat=repeat))
    finally:
        raid.kernels.xor_blocks = saved
    return 64 / best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", dest="json_out")
    args = ap.parse_args(argv)

    impls = {"python": _xorpy}
    if _xorcore is not None:
        impls["cython"] = _xorcore
    else:
        print("compiled kernel not available; timing the fallback only", file=sys.stderr)

    rows = []
    print(f"{'case':<22}" + "".join(f"{name:>16}" for name in impls) + "   speedup")
    for width in (3, 5):
        for bs in (512, 4096, 131072):
            rates = {n: time_xor(m, width, bs, args.repeat) for n, m in impls.items()}
            rows.append({"case": f"xor {width}x{bs}", **{n: r / 1e6 for n, r in rates.items()}})
            cells = "".join(f"{r / 1e6:>11.1f} MB/s" for r in rates.values())
            speed = rates["cython"] / rates["python"] if "cython" in rates else float("nan")
            print(f"{'xor ' + str(width) + 'x' + str(bs):<22}{cells}   {speed:6.1f}x")
    rates = {n: time_raid(m, args.repeat) for n, m in impls.items()}
    rows.append({"case": "raid5 write+safe_read", **rates})
    cells = "".join(f"{r:>9.0f} str/s" for r in rates.values())
    speed = rates["cython"] / rates["python"] if "cython" in rates else float("nan")
    print(f"{'raid5 write+safe_read':<22}{cells}   {speed:6.1f}x")
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
