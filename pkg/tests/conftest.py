import sys
import random

import pytest

from bdevstack.blockcore import DeviceGeometry, DeviceKind, DeviceSpec, Registry
from bdevstack.backstores import MemoryDevice, NullDevice
from bdevstack.engine import Reactor


def xor_oracle(blocks):
    """Byte-at-a-time XOR; deliberately naive so it shares nothing with the kernels."""
    out = [0] * len(blocks[0])
    for b in blocks:
        for i, v in enumerate(b):
            out[i] ^= v
    return bytes(out)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def mem4():
    """Four 4096-byte x 64-block memory devices."""
    return [MemoryDevice(f"m{i}", DeviceGeometry(4096, 64)) for i in range(4)]


@pytest.fixture
def reactor():
    r = Reactor(idle_yield=True, name="test-reactor")
    r.start()
    yield r
    r.stop()


@pytest.fixture
def raid1_null_registry(reactor):
    reg = Registry(reactor)
    reg.register_device(DeviceSpec("n0", DeviceKind.NULL, 4096, 1 << 16))
    reg.register_device(DeviceSpec("n1", DeviceKind.NULL, 4096, 1 << 16))
    reg.register_device(DeviceSpec("r0", DeviceKind.RAID, bases=["n0", "n1"],
                                   params={"level": "raid1"}))
    yield reg
    reg.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
