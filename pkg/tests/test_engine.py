import threading
import time

import pytest

from bdevstack.backstores import MemoryDevice, NullDevice
from bdevstack.blockcore import BlockDevice, DeviceGeometry, DeviceKind, IORequest, Status
from bdevstack.engine import EngineError, QueueFull, Reactor
from bdevstack.raid import RaidDevice

G = DeviceGeometry(512, 1024)


class Exploding(BlockDevice):
    kind = DeviceKind.NULL

    def read_blocks(self, lba, num_blocks):
        raise RuntimeError("boom")


def test_depth_back_pressure():
    r = Reactor()  # not started: nothing drains
    ch = r.create_channel(NullDevice("n", G), depth=32)
    for i in range(32):
        ch.submit(IORequest.read(i))
    with pytest.raises(QueueFull):
        ch.submit(IORequest.read(0), block=False)
    assert not ch.try_submit(IORequest.read(0))
    t0 = time.monotonic()
    with pytest.raises(QueueFull):
        ch.submit(IORequest.read(0), timeout=0.05)
    assert time.monotonic() - t0 >= 0.04
    r.run_once()  # completing frees the slots, reaping is not required
    assert ch.inflight == 0 and len(ch.poll()) == 32
    assert ch.try_submit(IORequest.read(0))
    assert ch.max_inflight == 32


def test_blocked_submitter_released_by_completion():
    r = Reactor()
    ch = r.create_channel(NullDevice("n", G), depth=1)
    ch.submit(IORequest.read(0))
    done = threading.Event()

    def second():
        ch.submit(IORequest.read(1))
        done.set()

    t = threading.Thread(target=second)
    t.start()
    assert not done.wait(0.05)
    r.run_once()
    assert done.wait(2)
    t.join()


def test_depth_one_serializes():
    with Reactor(idle_yield=True) as r:
        dev = MemoryDevice("m", G)
        ch = r.create_channel(dev, depth=1)
        order = []
        for i in range(50):
            ch.submit(IORequest.write(i, bytes([i]) * 512, 512))
            order.append(ch.get(2).request_id)
        assert ch.max_inflight == 1
        assert dev.read_blocks(49, 1) == bytes([49]) * 512


def test_ten_thousand_across_four_channels():
    with Reactor(idle_yield=True) as r:
        dev = NullDevice("n", G)
        chans = [r.create_channel(dev, depth=64) for _ in range(4)]
        sent = {id(c): [] for c in chans}
        got = {id(c): [] for c in chans}

        def producer(ch):
            for i in range(2500):
                sent[id(ch)].append(ch.submit(IORequest.read(i % 1024)))
                got[id(ch)].extend(c.request_id for c in ch.poll())

        ts = [threading.Thread(target=producer, args=(c,)) for c in chans]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        for ch in chans:
            while len(got[id(ch)]) < 2500:
                c = ch.get(5)
                assert c is not None
                got[id(ch)].append(c.request_id)
            assert got[id(ch)] == sent[id(ch)]  # FIFO per channel
            assert ch.submitted == ch.completed == 2500 and ch.inflight == 0


def test_stop_drains():
    r = Reactor(idle_yield=True)
    ch = r.create_channel(NullDevice("n", G), depth=200)
    for i in range(200):
        ch.submit(IORequest.read(i))
    r.start()
    r.stop()
    assert len(ch.poll()) == 200


def test_zero_channels_stoppable():
    for idle in (False, True):
        r = Reactor(idle_yield=idle).start()
        time.sleep(0.02)
        r.stop()
        assert not r.running and r.iterations > 0


def test_double_start():
    r = Reactor(idle_yield=True).start()
    with pytest.raises(EngineError):
        r.start()
    r.stop()


def test_pinning():
    a, b = Reactor(), Reactor()
    bases = [MemoryDevice(f"m{i}", G) for i in range(2)]
    raid = RaidDevice("r", bases, "raid1")
    a.create_channel(raid)
    assert bases[0].reactor is a
    with pytest.raises(EngineError):
        b.create_channel(bases[1])
    with pytest.raises(EngineError):
        a.create_channel(None)


def test_device_bug_surfaces_as_io_error():
    r = Reactor()
    ch = r.create_channel(Exploding("x", G))
    ch.submit(IORequest.read(0))
    r.run_once()
    (c,) = ch.poll()
    assert c.status is Status.IO_ERROR and "boom" in c.detail


def test_callback_mode_releases_slot():
    r = Reactor()
    ch = r.create_channel(NullDevice("n", G), depth=1)
    seen = []
    ch.submit(IORequest.read(0), callback=seen.append)
    r.run_once()
    assert len(seen) == 1 and ch.inflight == 0
    ch.submit(IORequest.read(2000), callback=seen.append)  # out of range: immediate
    assert seen[-1].status is Status.OUT_OF_RANGE


def test_closed_channel():
    r = Reactor()
    ch = r.create_channel(NullDevice("n", G))
    ch.close()
    assert ch not in r.channels
    with pytest.raises(EngineError):
        ch.submit(IORequest.read(0))


def test_latency_recorded():
    r = Reactor()
    ch = r.create_channel(NullDevice("n", G))
    ch.submit(IORequest.read(0))
    time.sleep(0.002)
    r.run_once()
    assert ch.poll()[0].submit_to_complete_ns >= 2_000_000
