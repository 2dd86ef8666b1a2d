"""RAID virtual block device: RAID0 striping, RAID1 mirroring, RAID5 parity.

RAID5 layout is left-asymmetric: the parity strip of stripe ``s`` lives on
device ``n - 1 - (s mod n)`` and the data strips fill the remaining devices in
ascending device order. With four devices and one-block strips::

    stripe   dev0   dev1   dev2   dev3
      0       d0     d1     d2     P
      1       d3     d4     P      d5
      2       d6     P      d7     d8
      3       P      d9     d10    d11

Physical slots are numbered ``stripe * n + device``, so stripe 2 occupies slots
8-11 with its parity in slot 9.

RAID5 only accepts full-stripe writes; there is no read-modify-write path.
Reads are parity-checked ("safe read"): each target block is reconstructed
from the other strips of its stripe and compared with what was read.
"""

from __future__ import annotations

import enum
import logging
import random
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

from . import kernels
from .blockcore import (
    BlockDevice,
    DeviceGeometry,
    DeviceIOError,
    DeviceKind,
    IOCompletion,
    IORequest,
    MAX_IO_BYTES,
    OutOfRange,
    ParityMismatch,
    Status,
    UnsupportedIO,
    ValidationError,
)

log = logging.getLogger(__name__)


class RaidLevel(enum.Enum):
    RAID0 = "raid0"
    RAID1 = "raid1"
    RAID5 = "raid5"

    @classmethod
    def parse(cls, value) -> "RaidLevel":
        if isinstance(value, RaidLevel):
            return value
        text = str(value).lower()
        if not text.startswith("raid"):
            text = "raid" + text
        try:
            return cls(text)
        except ValueError:
            raise ValidationError(f"unsupported RAID level {value!r}") from None


@dataclass(frozen=True)
class RaidLayout:
    level: RaidLevel
    num_devices: int
    strip_size_blocks: int
    device_blocks: int

    def __post_init__(self):
        minimum = 3 if self.level is RaidLevel.RAID5 else 2
        if self.num_devices < minimum:
            raise ValidationError(
                f"{self.level.value} needs at least {minimum} devices, got {self.num_devices}")
        if self.strip_size_blocks <= 0:
            raise ValidationError("strip_size_blocks must be positive")
        if self.device_blocks < self.strip_size_blocks:
            raise ValidationError("base devices are smaller than one strip")

    @property
    def data_strips(self) -> int:
        if self.level is RaidLevel.RAID1:
            return 1
        if self.level is RaidLevel.RAID5:
            return self.num_devices - 1
        return self.num_devices

    @property
    def stripe_blocks(self) -> int:
        """Logical blocks held by one stripe."""
        return self.data_strips * self.strip_size_blocks

    @property
    def num_stripes(self) -> int:
        return self.device_blocks // self.strip_size_blocks

    @property
    def exposed_blocks(self) -> int:
        if self.level is RaidLevel.RAID1:
            return self.device_blocks
        return self.num_stripes * self.stripe_blocks

    def parity_device(self, stripe: int) -> Optional[int]:
        if self.level is not RaidLevel.RAID5:
            return None
        n = self.num_devices
        return n - 1 - (stripe % n)

    def data_device(self, stripe: int, strip_in_stripe: int) -> int:
        p = self.parity_device(stripe)
        if p is not None and strip_in_stripe >= p:
            return strip_in_stripe + 1
        return strip_in_stripe


@dataclass(frozen=True)
class StripeAddress:
    stripe_index: int
    strip_in_stripe: int
    device_index: int
    offset_in_strip: int
    strip_size_blocks: int = 1

    @property
    def physical_block(self) -> int:
        return self.stripe_index * self.strip_size_blocks + self.offset_in_strip


def map_logical_to_physical(lba: int, layout: RaidLayout) -> StripeAddress:
    if not 0 <= lba < layout.exposed_blocks:
        raise OutOfRange(f"lba {lba} outside 0..{layout.exposed_blocks - 1}")
    strip = layout.strip_size_blocks
    if layout.level is RaidLevel.RAID1:
        return StripeAddress(lba // strip, 0, 0, lba % strip, strip)
    stripe, idx = divmod(lba, layout.stripe_blocks)
    k, off = divmod(idx, strip)
    return StripeAddress(stripe, k, layout.data_device(stripe, k), off, strip)


@dataclass
class ParityReport:
    lba: int
    stripe_index: int
    matched: bool
    expected_digest: str
    reconstructed_digest: str

    @property
    def status(self) -> Status:
        return Status.OK if self.matched else Status.PARITY_MISMATCH


@dataclass
class PoisonConfig:
    enabled: bool = False
    probability: float = 0.001
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= float(self.probability) <= 1.0:
            raise ValidationError(f"poison probability {self.probability} not in [0, 1]")


@dataclass(frozen=True)
class PoisonEvent:
    lba: int
    stripe_index: int
    device_index: int
    physical_block: int


def _digest(block) -> str:
    return f"{zlib.crc32(block):08x}"


def compute_parity(data_strips: Sequence[bytes]) -> bytes:
    """Byte-wise XOR of the data strips of one stripe."""
    if not data_strips:
        raise ValidationError("compute_parity needs at least one strip")
    try:
        return kernels.xor_blocks(data_strips)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def flip_first_bit(block) -> bytes:
    out = bytearray(block)
    out[0] ^= 0x01
    return bytes(out)


def poison_filter(block: bytes, cfg: PoisonConfig, rng: random.Random) -> bytes:
    """Return ``block`` with bit 0 of byte 0 inverted with probability ``cfg.probability``.

    One draw is taken from ``rng`` per call while poisoning is enabled, so a
    fixed seed and write trace reproduce the same poisoned stream.
    """
    if not cfg.enabled:
        return block
    if rng.random() < cfg.probability and len(block):
        return flip_first_bit(block)
    return block


class RaidDevice(BlockDevice):
    kind = DeviceKind.RAID

    def __init__(self, device_id: str, bases: Sequence[BlockDevice], level,
                 strip_size_blocks: int = 1, safe_read: bool = True,
                 poison: Optional[PoisonConfig] = None):
        if not bases:
            raise ValidationError("RAID needs base devices")
        geoms = {b.geometry for b in bases}
        if len(geoms) != 1:
            raise ValidationError(f"RAID bases must share one geometry, got {sorted(map(str, geoms))}")
        base_geom = bases[0].geometry
        layout = RaidLayout(RaidLevel.parse(level), len(bases), strip_size_blocks,
                            base_geom.block_count)
        if layout.level is RaidLevel.RAID5 and layout.stripe_blocks * base_geom.block_size > MAX_IO_BYTES:
            log.warning("%s: stripe of %d bytes exceeds the per-I/O ceiling; writes will fail",
                        device_id, layout.stripe_blocks * base_geom.block_size)
        super().__init__(device_id, DeviceGeometry(base_geom.block_size, layout.exposed_blocks), bases)
        self.layout = layout
        self.safe_read_enabled = safe_read
        self.poison = poison or PoisonConfig()
        self._poison_rng = random.Random(self.poison.rng_seed)
        self.poison_log: list[PoisonEvent] = []
        self.parity_failures = 0
        self._next_mirror = 0
        self.last_read_mirror: Optional[int] = None

    @classmethod
    def from_params(cls, device_id, bases, params: dict) -> "RaidDevice":
        poison = params.get("poison") or {}
        if isinstance(poison, dict):
            poison = PoisonConfig(enabled=bool(poison.get("enabled", False)),
                                  probability=float(poison.get("probability", 0.001)),
                                  rng_seed=int(poison.get("seed", 0)))
        return cls(device_id, bases, params.get("level", "raid1"),
                   strip_size_blocks=int(params.get("strip_size_blocks", 1)),
                   safe_read=bool(params.get("safe_read", True)), poison=poison)

    @property
    def level(self) -> RaidLevel:
        return self.layout.level

    @property
    def poison_count(self) -> int:
        return len(self.poison_log)

    def map(self, lba: int) -> StripeAddress:
        return map_logical_to_physical(lba, self.layout)

    # -- RAID0 / RAID1 ------------------------------------------------------

    def _segments(self, lba: int, num_blocks: int):
        """Yield (device_index, physical_block, count, logical_start) runs within one strip."""
        strip = self.layout.strip_size_blocks
        end = lba + num_blocks
        while lba < end:
            addr = self.map(lba)
            count = min(strip - addr.offset_in_strip, end - lba)
            yield addr.device_index, addr.physical_block, count, lba
            lba += count

    def _raid0_read(self, lba, num_blocks):
        return b"".join(self.bases[d].read_blocks(phys, count)
                        for d, phys, count, _ in self._segments(lba, num_blocks))

    def _raid0_write(self, lba, data):
        bs = self.block_size
        view = memoryview(data)
        base_lba = lba
        for d, phys, count, start in self._segments(lba, len(data) // bs):
            off = (start - base_lba) * bs
            self.bases[d].write_blocks(phys, view[off:off + count * bs])

    def _raid1_read(self, lba, num_blocks):
        mirror = self._next_mirror % len(self.bases)
        self._next_mirror += 1
        self.last_read_mirror = mirror
        return self.bases[mirror].read_blocks(lba, num_blocks)

    def _raid1_write(self, lba, data):
        errors = []
        for base in self.bases:
            try:
                base.write_blocks(lba, data)
            except (DeviceIOError, OSError) as exc:
                errors.append(f"{base.device_id}: {exc}")
        if errors:
            raise DeviceIOError("mirror write failed: " + "; ".join(errors))

    # -- RAID5 --------------------------------------------------------------

    def _stripe_bytes(self) -> int:
        return self.layout.stripe_blocks * self.block_size

    def _check_stripe(self, stripe_index: int):
        if not 0 <= stripe_index < self.layout.num_stripes:
            raise OutOfRange(f"stripe {stripe_index} outside 0..{self.layout.num_stripes - 1}")

    def _write_stripe(self, stripe_index: int, data) -> None:
        self._check_stripe(stripe_index)
        layout = self.layout
        bs = self.block_size
        strip_bytes = layout.strip_size_blocks * bs
        view = memoryview(data)
        strips = [bytes(view[k * strip_bytes:(k + 1) * strip_bytes]) for k in range(layout.data_strips)]
        parity = compute_parity(strips)
        phys = stripe_index * layout.strip_size_blocks
        if self.poison.enabled:
            strips = [self._poison_strip(stripe_index, k, s) for k, s in enumerate(strips)]
        for k, strip in enumerate(strips):
            self.bases[layout.data_device(stripe_index, k)].write_blocks(phys, strip)
        self.bases[layout.parity_device(stripe_index)].write_blocks(phys, parity)

    def _poison_strip(self, stripe_index: int, k: int, strip: bytes) -> bytes:
        # parity is computed before this runs, so a flip leaves the stripe inconsistent
        bs = self.block_size
        layout = self.layout
        out = None
        for j in range(layout.strip_size_blocks):
            block = strip[j * bs:(j + 1) * bs]
            if poison_filter(block, self.poison, self._poison_rng) is not block:
                if out is None:
                    out = bytearray(strip)
                out[j * bs] ^= 0x01
                lba = stripe_index * layout.stripe_blocks + k * layout.strip_size_blocks + j
                self.poison_log.append(PoisonEvent(
                    lba, stripe_index, layout.data_device(stripe_index, k),
                    stripe_index * layout.strip_size_blocks + j))
        return strip if out is None else bytes(out)

    def full_stripe_write(self, stripe_index: int, data) -> IOCompletion:
        """Write one whole stripe. ``data`` is the stripe bytes or its list of data strips."""
        if not isinstance(data, (bytes, bytearray, memoryview)):
            data = b"".join(data)
        if len(data) != self._stripe_bytes() or self.level is not RaidLevel.RAID5:
            return IOCompletion(0, Status.UNSUPPORTED,
                                detail="only full-stripe RAID5 writes are supported")
        req_lba = stripe_index * self.layout.stripe_blocks
        return self.execute(IORequest.write(req_lba, bytes(data), self.block_size))

    def _raid5_write(self, lba, data):
        stripe_blocks = self.layout.stripe_blocks
        num_blocks = len(data) // self.block_size
        if lba % stripe_blocks or num_blocks % stripe_blocks:
            raise UnsupportedIO(
                f"RAID5 accepts only full-stripe writes ({stripe_blocks} blocks, stripe-aligned); "
                f"got lba={lba} num_blocks={num_blocks}")
        sb = self._stripe_bytes()
        view = memoryview(data)
        for i in range(num_blocks // stripe_blocks):
            self._write_stripe(lba // stripe_blocks + i, view[i * sb:(i + 1) * sb])

    def reconstruct_read(self, stripe_index: int, missing_device, offset: int = 0,
                         num_blocks: Optional[int] = None) -> bytes:
        """Rebuild the strip of ``missing_device`` as the XOR of every other strip in the stripe.

        Works for data and parity strips alike. Only one device may be missing.
        """
        if self.level is not RaidLevel.RAID5:
            raise UnsupportedIO("reconstruct_read requires RAID5")
        if not isinstance(missing_device, int):
            missing = list(missing_device)
            if len(missing) != 1:
                raise UnsupportedIO(f"single parity cannot rebuild {len(missing)} missing devices")
            missing_device = missing[0]
        self._check_stripe(stripe_index)
        strip = self.layout.strip_size_blocks
        if num_blocks is None:
            num_blocks = strip - offset
        if not 0 <= missing_device < self.layout.num_devices:
            raise OutOfRange(f"device index {missing_device} out of range")
        if offset < 0 or num_blocks <= 0 or offset + num_blocks > strip:
            raise OutOfRange("row range outside the strip")
        phys = stripe_index * strip + offset
        others = [self.bases[d].read_blocks(phys, num_blocks)
                  for d in range(self.layout.num_devices) if d != missing_device]
        return kernels.xor_blocks(others)

    def safe_read(self, lba: int):
        """Read one block and verify it against its parity reconstruction."""
        if self.level is not RaidLevel.RAID5:
            raise UnsupportedIO("safe_read requires RAID5")
        if not 0 <= lba < self.geometry.block_count:
            raise OutOfRange(f"lba {lba} out of range")
        data, reports = self._raid5_read(lba, 1, verify=True)
        return data, reports[0]

    def _raid5_read(self, lba, num_blocks, verify):
        layout = self.layout
        bs = self.block_size
        strip = layout.strip_size_blocks
        out = []
        reports = []
        end = lba + num_blocks
        while lba < end:
            stripe = lba // layout.stripe_blocks
            stop = min(end, (stripe + 1) * layout.stripe_blocks)
            addrs = [self.map(b) for b in range(lba, stop)]
            if not verify:
                for d, phys, count, _ in self._segments(lba, stop - lba):
                    out.append(self.bases[d].read_blocks(phys, count))
                lba = stop
                continue
            lo = min(a.offset_in_strip for a in addrs)
            hi = max(a.offset_in_strip for a in addrs)
            rows = [self.bases[d].read_blocks(stripe * strip + lo, hi - lo + 1)
                    for d in range(layout.num_devices)]
            for a, block_lba in zip(addrs, range(lba, stop)):
                o = (a.offset_in_strip - lo) * bs
                cells = [r[o:o + bs] for r in rows]
                target = cells[a.device_index]
                # reconstruct the target from its siblings, then compare
                rebuilt = kernels.xor_blocks(c for d, c in enumerate(cells) if d != a.device_index)
                matched = rebuilt == target
                reports.append(ParityReport(
                    block_lba, stripe, matched,
                    _digest(target), _digest(rebuilt)))
                out.append(target)
            lba = stop
        return b"".join(out), reports

    # -- dispatch -----------------------------------------------------------

    def read_blocks(self, lba, num_blocks):
        level = self.level
        if level is RaidLevel.RAID1:
            return self._raid1_read(lba, num_blocks)
        if level is RaidLevel.RAID0:
            return self._raid0_read(lba, num_blocks)
        data, reports = self._raid5_read(lba, num_blocks, verify=self.safe_read_enabled)
        bad = [r for r in reports if not r.matched]
        if bad:
            self.parity_failures += len(bad)
            log.warning("%s: parity check failed for lba(s) %s", self.device_id,
                        ", ".join(str(r.lba) for r in bad))
            raise ParityMismatch(f"parity check failed for {len(bad)} block(s)",
                                 payload=data, detail=bad)
        return data

    def write_blocks(self, lba, data):
        level = self.level
        if level is RaidLevel.RAID1:
            self._raid1_write(lba, data)
        elif level is RaidLevel.RAID0:
            self._raid0_write(lba, data)
        else:
            self._raid5_write(lba, data)

