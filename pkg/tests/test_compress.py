import gzip
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from bdevstack.backstores import MemoryDevice
from bdevstack.bench import default_corpus_path
from bdevstack.blockcore import (
    DeviceGeometry,
    DeviceIOError,
    IORequest,
    SizeLimitExceeded,
    Status,
)
from bdevstack.compress import (
    CompressDevice,
    CompressLimits,
    CompressionMap,
    ExtentAllocator,
    compress_block,
    decompress_block,
)

TEXT = (b"It was the best of times, it was the worst of times, it was the age of "
        b"wisdom, it was the age of foolishness. ") * 40


def make(bs=4096, base_blocks=256, **kw):
    base = MemoryDevice("b", DeviceGeometry(512, base_blocks * bs // 512))
    return CompressDevice("c", base, block_size=bs, **kw), base


class TestCodec:
    def test_text_ratio(self):
        block = TEXT[:4096]
        assert len(block) / len(compress_block(block)) >= 3

    def test_empty(self):
        s = compress_block(b"")
        assert len(s) > 0 and decompress_block(s, 0) == b""

    def test_random_incompressible(self):
        data = random.Random(7).randbytes(4096)
        assert len(compress_block(data)) >= len(data)

    @given(st.binary(max_size=5000))
    @settings(max_examples=100, deadline=None)
    def test_round_trip(self, data):
        assert decompress_block(compress_block(data), len(data)) == data

    def test_truncated(self):
        s = compress_block(TEXT[:4096])
        with pytest.raises(DeviceIOError):
            decompress_block(s[:-5], 4096)

    def test_wrong_length(self):
        s = compress_block(TEXT[:4096])
        with pytest.raises(DeviceIOError):
            decompress_block(s, 4095)
        with pytest.raises(DeviceIOError):
            decompress_block(s, 4097)

    def test_trailing(self):
        with pytest.raises(DeviceIOError):
            decompress_block(compress_block(b"abc") + b"x", 3)

    def test_seeded_corruptions_never_pass_silently(self):
        rng = random.Random(11)
        block = TEXT[:4096]
        s = compress_block(block)
        for _ in range(500):
            bad = bytearray(s)
            bad[rng.randrange(len(bad))] ^= 1 << rng.randrange(8)
            try:
                out = decompress_block(bytes(bad), 4096)
            except DeviceIOError:
                continue
            assert out == block  # only acceptable non-error outcome
        # the adler32 trailer means a payload-changing flip is always caught

    def test_job_limit(self):
        lim = CompressLimits(max_job_bytes=1024)
        with pytest.raises(SizeLimitExceeded):
            compress_block(bytes(1025), limits=lim)
        with pytest.raises(SizeLimitExceeded):
            decompress_block(compress_block(bytes(10)), 2048, limits=lim)

    def test_default_limit_is_128_mib(self):
        assert CompressLimits().max_job_bytes == 128 * 2**20


class TestAllocator:
    def test_first_fit_and_coalesce(self):
        a = ExtentAllocator(1000)
        offs = [a.allocate(100) for _ in range(5)]
        assert offs == [0, 100, 200, 300, 400]
        a.release(100, 100)
        a.release(300, 100)
        a.release(200, 100)
        assert a.free_extents == [(100, 300)]
        assert a.allocate(50) == 100
        # 400..500 touches both the 150..400 hole and the cursor: all of it goes back
        a.release(400, 100)
        assert a.cursor == 150 and a.free_extents == []

    def test_full(self):
        a = ExtentAllocator(100)
        a.allocate(90)
        with pytest.raises(DeviceIOError):
            a.allocate(20)

    def test_claim(self):
        a = ExtentAllocator(1000)
        a.allocate(300)
        a.release(100, 100)
        a.claim(120, 30)
        assert a.free_extents == [(100, 20), (150, 50)]
        with pytest.raises(DeviceIOError):
            a.claim(100, 50)

    @given(st.lists(st.tuples(st.booleans(), st.integers(1, 50)), max_size=80))
    @settings(max_examples=80, deadline=None)
    def test_no_overlap(self, ops):
        a = ExtentAllocator(2000)
        live = {}
        for alloc, n in ops:
            if alloc or not live:
                try:
                    off = a.allocate(n)
                except DeviceIOError:
                    continue
                live[off] = n
            else:
                off = sorted(live)[n % len(live)]
                a.release(off, live.pop(off))
            spans = sorted(list(live.items()) + a.free_extents)
            for (o1, n1), (o2, _) in zip(spans, spans[1:]):
                assert o1 + n1 <= o2
            assert all(o + n <= a.cursor for o, n in spans)


class TestDevice:
    def test_compressible_block_saves_space(self):
        c, _ = make()
        assert c.cwrite(0, TEXT[:4096]).ok
        ext = c.map.lookup(0)
        assert ext.compressed and ext.length < 4096

    def test_random_stored_raw(self):
        c, _ = make()
        data = random.Random(3).randbytes(4096)
        c.cwrite(1, data)
        assert not c.map.lookup(1).compressed and c.map.lookup(1).length == 4096
        assert c.cread(1).payload == data

    def test_overwrite_one_live_extent(self):
        c, _ = make()
        c.cwrite(4, TEXT[:4096])
        c.cwrite(4, random.Random(1).randbytes(4096))
        c.cwrite(4, TEXT[100:4196])
        assert len(c.map.entries) == 1
        assert c.stored_bytes == c.map.lookup(4).length
        assert c.cread(4).payload == TEXT[100:4196]

    def test_unwritten_reads_zero(self):
        c, _ = make()
        assert c.cread(9).payload == bytes(4096)

    def test_sequential_mib(self):
        c, _ = make(bs=4096, base_blocks=512)
        text = gzip.open(default_corpus_path()).read()[:1 << 20]
        for i in range(0, len(text), 32768):
            assert c.execute(IORequest.write(i // 4096, text[i:i + 32768], 4096)).ok
        back = b"".join(c.execute(IORequest.read(i // 4096, 8)).payload
                        for i in range(0, len(text), 32768))
        assert back == text and c.stored_bytes < len(text)

    def test_base_full_is_io_error(self):
        c, _ = make(base_blocks=2, block_count=8)
        rnd = random.Random(2)
        assert c.cwrite(0, rnd.randbytes(4096)).ok
        assert c.cwrite(1, rnd.randbytes(4096)).ok
        c3 = c.cwrite(2, rnd.randbytes(4096))
        assert c3.status is Status.IO_ERROR and "full" in c3.detail
        # failed overwrite keeps the old data
        old = c.cread(0).payload
        assert c.cwrite(0, rnd.randbytes(4096)).ok  # same size: fits in its own hole
        c.cwrite(1, TEXT[:4096])
        assert c.cread(1).payload == TEXT[:4096]
        assert old != c.cread(0).payload

    def test_failed_overwrite_restores_mapping(self):
        c, _ = make(base_blocks=2, block_count=8)
        c.cwrite(0, TEXT[:4096])
        small = c.map.lookup(0)
        c.cwrite(1, random.Random(1).randbytes(4096))
        # fill what remains so a raw 4 KiB extent cannot fit anywhere
        rest = c.map.allocator.capacity - c.map.allocator.cursor
        c.map.allocator.allocate(rest)
        bad = c.cwrite(0, random.Random(9).randbytes(4096))
        assert bad.status is Status.IO_ERROR
        assert c.map.lookup(0) == small and c.cread(0).payload == TEXT[:4096]

    def test_corrupt_extent_is_io_error(self):
        c, base = make()
        c.cwrite(0, TEXT[:4096])
        ext = c.map.lookup(0)
        base.raw()[ext.offset + ext.length // 2] ^= 0xFF
        assert c.cread(0).status is Status.IO_ERROR

    def test_io_ceiling(self):
        c, _ = make()
        r = c.execute(IORequest.read(0, 33))
        assert r.status is Status.SIZE_LIMIT

    def test_job_limit_on_device(self):
        c, _ = make(limits=CompressLimits(max_job_bytes=2048))
        assert c.cwrite(0, TEXT[:4096]).status is Status.SIZE_LIMIT

    def test_map_checkpoint(self, tmp_path):
        from bdevstack.backstores import FileDevice
        mp = tmp_path / "map.json"
        geom = DeviceGeometry(512, 64)
        base = FileDevice("f", geom, tmp_path / "base.img")
        c = CompressDevice("c", base, block_size=4096, block_count=16, map_path=mp)
        c.cwrite(3, TEXT[:4096])
        c.cwrite(5, TEXT[50:4146])
        assert c.execute(IORequest.flush()).ok
        assert json.loads(mp.read_text())["entries"].keys() == {"3", "5"}
        base.close()
        base2 = FileDevice("f", geom, tmp_path / "base.img")
        c2 = CompressDevice("c", base2, block_size=4096, block_count=16, map_path=mp)
        assert c2.cread(3).payload == TEXT[:4096] and c2.cread(5).payload == TEXT[50:4146]
        base2.close()

    def test_map_dict_round_trip(self):
        m = CompressionMap(10_000)
        m.replace(1, 100, True)
        m.replace(2, 50, False)
        m.replace(1, 30, True)
        m2 = CompressionMap.from_dict(json.loads(json.dumps(m.to_dict())))
        assert m2.entries == m.entries and m2.stored_bytes == m.stored_bytes
        assert m2.allocator.free_extents == m.allocator.free_extents
