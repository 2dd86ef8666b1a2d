import threading

import pytest
from hypothesis import given, settings, strategies as st

from bdevstack.blockcore import (
    MAX_IO_BYTES,
    DependencyError,
    DeviceGeometry,
    DeviceKind,
    DeviceSpec,
    IORequest,
    Op,
    RegistrationError,
    Registry,
    Status,
    ValidationError,
    next_request_id,
)


def drain(reg, handle, n, spins=10_000):
    got = []
    for _ in range(spins):
        got += reg.poll(handle)
        if len(got) >= n:
            return got
    raise AssertionError(f"only {len(got)} of {n} completions")


class TestGeometry:
    def test_capacity(self):
        assert DeviceGeometry(4096, 1_048_576).capacity == 4 * 2**30

    @pytest.mark.parametrize("bs", [0, 256, 511, 3000, 262144])
    def test_bad_block_size(self, bs):
        with pytest.raises(ValidationError):
            DeviceGeometry(bs, 8)

    def test_ceiling_is_allowed(self):
        assert DeviceGeometry(MAX_IO_BYTES, 1).capacity == MAX_IO_BYTES

    def test_bad_count(self):
        with pytest.raises(ValidationError):
            DeviceGeometry(4096, 0)


class TestRequests:
    def test_write_payload_must_be_whole_blocks(self):
        with pytest.raises(ValidationError):
            IORequest.write(0, b"x" * 100, 4096)

    def test_ids_unique_across_threads(self):
        ids = []
        lock = threading.Lock()

        def grab():
            mine = [next_request_id() for _ in range(2000)]
            with lock:
                ids.extend(mine)

        ts = [threading.Thread(target=grab) for _ in range(4)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert len(set(ids)) == len(ids) == 8000

    def test_flush_shape(self):
        r = IORequest.flush(request_id=7)
        assert (r.op, r.num_blocks, r.request_id) == (Op.FLUSH, 0, 7)


class TestRegistry:
    def test_null_handle(self):
        reg = Registry()
        h = reg.register_device(DeviceSpec("n", DeviceKind.NULL, 4096, 1_048_576))
        assert h.geometry.capacity == 4 * 2**30
        assert h.kind is DeviceKind.NULL

    def test_duplicate(self):
        reg = Registry()
        reg.register_device(DeviceSpec("n", DeviceKind.NULL, 4096, 8))
        with pytest.raises(RegistrationError):
            reg.register_device(DeviceSpec("n", DeviceKind.NULL, 4096, 8))

    def test_unknown_base(self):
        reg = Registry()
        with pytest.raises(DependencyError):
            reg.register_device(DeviceSpec("r", DeviceKind.RAID, bases=["m0", "m1"],
                                           params={"level": "raid1"}))

    def test_oversized_block(self):
        with pytest.raises(ValidationError):
            Registry().register_device(DeviceSpec("m", DeviceKind.MEMORY, 262144, 4))

    def test_virtual_without_bases(self):
        with pytest.raises(DependencyError):
            Registry().register_device(DeviceSpec("c", DeviceKind.COMPRESS))


class TestSubmitPoll:
    def test_null_read_zero(self):
        reg = Registry()
        h = reg.register_device(DeviceSpec("n", DeviceKind.NULL, 4096, 64))
        rid = reg.submit_io(h, IORequest.read(0, 1))
        (c,) = drain(reg, h, 1)
        assert c.request_id == rid and c.status is Status.OK and c.payload == bytes(4096)

    def test_write_past_end_is_immediate(self):
        reg = Registry()
        h = reg.register_device(DeviceSpec("n", DeviceKind.NULL, 4096, 64))
        reg.submit_io(h, IORequest.write(64, bytes(4096), 4096))
        # completes at submission: no reactor pass is needed to see it
        (c,) = reg._channel(h).poll()
        assert c.status is Status.OUT_OF_RANGE and c.payload == b""

    def test_malformed_payload_rejected_before_enqueue(self):
        reg = Registry()
        h = reg.register_device(DeviceSpec("m", DeviceKind.MEMORY, 4096, 64))
        bad = IORequest(Op.WRITE, 0, 1, b"short")
        with pytest.raises(ValidationError):
            reg.submit_io(h, bad)
        assert reg._channel(h).submitted == 0

    def test_read_your_writes(self, rng):
        reg = Registry()
        h = reg.register_device(DeviceSpec("m", DeviceKind.MEMORY, 4096, 64))
        p = rng.randbytes(4096)
        reg.submit_io(h, IORequest.write(5, p, 4096))
        drain(reg, h, 1)
        reg.submit_io(h, IORequest.read(5))
        (c,) = drain(reg, h, 1)
        assert c.payload == p

    def test_oversize_request_is_size_limit(self):
        reg = Registry()
        h = reg.register_device(DeviceSpec("m", DeviceKind.MEMORY, 4096, 64))
        reg.submit_io(h, IORequest.read(0, 33))
        (c,) = drain(reg, h, 1)
        assert c.status is Status.SIZE_LIMIT


@given(st.lists(st.tuples(st.sampled_from(["r", "w", "f"]), st.integers(-2, 20),
                          st.integers(1, 3)), max_size=40))
@settings(max_examples=60, deadline=None)
def test_completion_totality_and_coupling(ops):
    """Every submission completes exactly once; non-OK completions carry no data."""
    reg = Registry()
    h = reg.register_device(DeviceSpec("m", DeviceKind.MEMORY, 512, 16))
    ids = []
    for kind, lba, n in ops:
        if kind == "r":
            req = IORequest.read(lba, n)
        elif kind == "w":
            req = IORequest.write(lba, bytes([n]) * 512 * n, 512)
        else:
            req = IORequest.flush()
        try:
            ids.append(reg.submit_io(h, req))
        except ValidationError:
            assert lba < 0
    got = drain(reg, h, len(ids)) if ids else []
    assert sorted(c.request_id for c in got) == sorted(ids)
    for c in got:
        if c.status is not Status.OK:
            assert c.payload == b""
