"""PCIe devices, the host root port with its IDE key store, and link transport.

Link encryption is symbolic: a realm transaction (T bit set) carries an
:class:`Envelope` naming the key it was sealed with and a per-direction
counter. The root port accepts it only if that key matches the key it holds
for the claimed requester id and the counter moves forward. Device identity
for attestation is an HMAC keyed by a secret the manufacturer burned into the
device; an emulated device has no such secret and cannot produce a report the
trust anchor accepts.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import AttestFailed, DeviceNotFound, DiscardedAtRootPort, NotRoot, RidInUse
from .world_memory import GRANULE_SIZE, AccessorCtx, World

MAX_BARS = 6
LOCAL_MEM_SIZE = GRANULE_SIZE

CONFIG_MAGIC = b"ACFG"
_CFG_HEADER = struct.Struct("<4sHBB")
_CFG_BAR = struct.Struct("<QQ")
_CFG_BARS_OFFSET = 0x10
_CFG_FW_OFFSET = 0x80


def bdf(bus: int, dev: int, fn: int) -> int:
    """Pack bus:device.function into the 16-bit requester id."""
    if not (0 <= bus < 256 and 0 <= dev < 32 and 0 <= fn < 8):
        raise ValueError("bus/device/function out of range")
    return (bus << 8) | (dev << 3) | fn


def parse_bdf(text: str) -> int:
    """Accept ``01:00.0`` (hex bus/dev) or a plain integer / 0x literal."""
    if ":" in text:
        bus, rest = text.split(":", 1)
        dev, fn = rest.split(".", 1)
        return bdf(int(bus, 16), int(dev, 16), int(fn))
    return int(text, 0)


def format_bdf(rid: int) -> str:
    return f"{rid >> 8:02x}:{(rid >> 3) & 0x1f:02x}.{rid & 7}"


# ---------------------------------------------------------------- config space

@dataclass(frozen=True)
class ConfigImage:
    rid: int
    bars: tuple[tuple[int, int], ...]   # (base ipa, size in bytes)
    firmware_digest: bytes
    debug_disabled: bool

    def encode(self) -> bytes:
        if len(self.bars) > MAX_BARS:
            raise ValueError(f"at most {MAX_BARS} BARs")
        blob = bytearray(GRANULE_SIZE)
        _CFG_HEADER.pack_into(blob, 0, CONFIG_MAGIC, self.rid, len(self.bars),
                              1 if self.debug_disabled else 0)
        for i, (base, size) in enumerate(self.bars):
            _CFG_BAR.pack_into(blob, _CFG_BARS_OFFSET + i * _CFG_BAR.size, base, size)
        blob[_CFG_FW_OFFSET:_CFG_FW_OFFSET + 32] = self.firmware_digest.ljust(32, b"\0")[:32]
        return bytes(blob)

    @classmethod
    def decode(cls, blob: bytes) -> Optional["ConfigImage"]:
        if len(blob) < _CFG_FW_OFFSET + 32:
            return None
        magic, rid, n_bars, dbg = _CFG_HEADER.unpack_from(blob, 0)
        if magic != CONFIG_MAGIC or n_bars > MAX_BARS:
            return None
        bars = tuple(_CFG_BAR.unpack_from(blob, _CFG_BARS_OFFSET + i * _CFG_BAR.size)
                     for i in range(n_bars))
        fw = bytes(blob[_CFG_FW_OFFSET:_CFG_FW_OFFSET + 32])
        return cls(rid, bars, fw, bool(dbg))


# ---------------------------------------------------------------- identity

class TrustAnchor:
    """Manufacturer root of trust: derives per-device identity secrets."""

    def __init__(self, root_secret: bytes = b"acaisim manufacturer root"):
        self._root = root_secret
        self._verified: dict = {}       # reports are frozen, so the verdict is too

    def device_secret(self, serial: str) -> bytes:
        return hmac.new(self._root, serial.encode(), hashlib.sha256).digest()

    def verify(self, report: "DeviceReport") -> bool:
        known = self._verified.get(report)
        if known is None:
            known = self._verified[report] = self._check_signature(report)
        return known

    def _check_signature(self, report: "DeviceReport") -> bool:
        expected = hmac.new(self.device_secret(report.serial), report.signed_bytes(),
                            hashlib.sha256).digest()
        return hmac.compare_digest(expected, report.signature)


@dataclass(frozen=True)
class DeviceReport:
    rid: int
    serial: str
    firmware_digest: bytes
    config_digest: bytes
    debug_disabled: bool
    bar_sizes: tuple[int, ...]          # bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        head = struct.pack("<HB", self.rid, 1 if self.debug_disabled else 0)
        sizes = b"".join(struct.pack("<Q", s) for s in self.bar_sizes)
        return (head + self.serial.encode() + b"\0" + self.firmware_digest
                + self.config_digest + sizes)


# ---------------------------------------------------------------- devices

TRANSFORMS: dict[str, Callable[[bytes], bytes]] = {
    "identity": lambda b: b,
    "negate": lambda b: bytes((-x) & 0xFF for x in b),
    "invert": lambda b: bytes(x ^ 0xFF for x in b),
}


@dataclass
class DeviceModel:
    name: str
    bus_addr: int
    bars: tuple[int, ...] = ()          # sizes in granules
    firmware_digest: bytes = hashlib.sha256(b"firmware v1").digest()
    debug_disabled: bool = True
    serial: Optional[str] = None
    identity_key: Optional[bytes] = None
    transform: str = "identity"
    link_key_id: Optional[int] = None
    tx_counter: int = 0
    rx_counter: int = 0
    local_mem: bytes = bytes(LOCAL_MEM_SIZE)
    bar_mem: dict[int, bytes] = field(default_factory=dict)
    config_space: bytes = b""

    def __post_init__(self):
        if len(self.bars) > MAX_BARS:
            raise ValueError(f"a device has at most {MAX_BARS} BARs")
        if not self.config_space:
            self.config_space = self.reset_config()

    @property
    def rid(self) -> int:
        return self.bus_addr

    def reset_config(self) -> bytes:
        bars = tuple((0, g * GRANULE_SIZE) for g in self.bars)
        return ConfigImage(self.rid, bars, self.firmware_digest, self.debug_disabled).encode()

    def bar_bytes(self, index: int) -> int:
        return self.bars[index] * GRANULE_SIZE

    def clone(self) -> "DeviceModel":
        new = object.__new__(DeviceModel)
        new.__dict__.update(self.__dict__)
        new.bar_mem = dict(self.bar_mem)
        return new


def genuine_device(anchor: TrustAnchor, name: str, bus_addr: int, bars=(), *,
                   firmware: bytes = b"firmware v1", debug_disabled: bool = True,
                   transform: str = "identity") -> DeviceModel:
    serial = f"SN-{name}-{bus_addr:04x}"
    return DeviceModel(name, bus_addr, tuple(bars), hashlib.sha256(firmware).digest(),
                       debug_disabled, serial, anchor.device_secret(serial), transform)


def emulated_device(name: str, bus_addr: int, bars=(), *, claims_serial: Optional[str] = None,
                    firmware: bytes = b"firmware v1") -> DeviceModel:
    """A hypervisor-emulated device: it may claim any serial but holds no real secret.

    It signs its reports with a key the hypervisor made up, so they never verify.
    """
    serial = claims_serial or f"SN-{name}-{bus_addr:04x}"
    forged = hashlib.sha256(b"made-up key for " + serial.encode()).digest()
    return DeviceModel(name, bus_addr, tuple(bars), hashlib.sha256(firmware).digest(),
                       True, serial, forged)


# ---------------------------------------------------------------- transactions

class TxnKind(enum.Enum):
    DMA_READ = "dma_read"
    DMA_WRITE = "dma_write"
    MMIO_READ = "mmio_read"
    MMIO_WRITE = "mmio_write"
    COMPLETION = "completion"


class Verdict(enum.Enum):
    DECRYPTED_OK = "decrypted_ok"
    DISCARD = "discard"
    PLAINTEXT_NORMAL = "plaintext_normal"


@dataclass(frozen=True)
class Envelope:
    key_id: Optional[int]
    counter: int
    integrity_ok: bool = True


@dataclass(frozen=True)
class PCIeTransaction:
    rid: int
    t_bit: bool
    kind: TxnKind
    ipa: int
    payload: bytes = b""
    length: int = 0
    envelope: Optional[Envelope] = None

    def __post_init__(self):
        if self.t_bit and self.envelope is None:
            raise ValueError("realm (T=1) traffic must travel inside an IDE envelope")


@dataclass(frozen=True)
class Sealed:
    """Tap view of an enveloped payload: only its length is visible."""

    key_id: Optional[int]
    length: int


@dataclass(frozen=True)
class TapRecord:
    txn: PCIeTransaction
    visible: object      # bytes for plaintext traffic, Sealed for enveloped traffic


class PcieFabric:
    """Devices in slots, the host root port, and an on-path adversarial tap."""

    def __init__(self, anchor: Optional[TrustAnchor] = None):
        self.anchor = anchor or TrustAnchor()
        self.slots: dict[int, DeviceModel] = {}
        self.key_store: dict[int, int] = {}
        self.rx_counters: dict[int, int] = {}
        self.tx_counters: dict[int, int] = {}
        self.tap: list[TapRecord] = []
        self.next_key = 1
        self.check_keys = True
        self.audit: list[tuple] = []

    # -- topology ---------------------------------------------------------
    def plug(self, dev: DeviceModel) -> None:
        self.slots[dev.bus_addr] = dev

    def unplug(self, bus_addr: int) -> Optional[DeviceModel]:
        return self.slots.pop(bus_addr, None)

    def probe(self, bus_addr: int) -> DeviceModel:
        dev = self.slots.get(bus_addr)
        if dev is None:
            raise DeviceNotFound(f"no device at {format_bdf(bus_addr)}")
        return dev

    def by_name(self, name: str) -> DeviceModel:
        for dev in self.slots.values():
            if dev.name == name:
                return dev
        raise DeviceNotFound(name)

    # -- IDE keys -----------------------------------------------------------
    def ide_program_key(self, rid: int, caller: AccessorCtx, key_id: Optional[int] = None) -> int:
        if caller.world is not World.ROOT:
            raise NotRoot("IDE keys live in root-only storage")
        if rid in self.key_store:
            raise RidInUse(f"rid {format_bdf(rid)} already keyed")
        if key_id is None:
            key_id = self.next_key
        self.next_key = max(self.next_key, key_id) + 1
        self.key_store[rid] = key_id
        self.rx_counters[rid] = 0
        self.tx_counters[rid] = 0
        dev = self.slots.get(rid)
        if dev is not None:
            # key establishment handshake with whatever answers at that address
            dev.link_key_id = key_id
            dev.tx_counter = 0
            dev.rx_counter = 0
        return key_id

    def ide_erase_key(self, rid: int, caller: AccessorCtx) -> None:
        if caller.world is not World.ROOT:
            raise NotRoot("IDE keys live in root-only storage")
        self.key_store.pop(rid, None)
        self.rx_counters.pop(rid, None)
        self.tx_counters.pop(rid, None)
        dev = self.slots.get(rid)
        if dev is not None:
            dev.link_key_id = None

    # -- inbound traffic ----------------------------------------------------
    def device_send(self, dev: DeviceModel, kind: TxnKind, ipa: int, *, payload: bytes = b"",
                    length: int = 0, t_bit: bool = True, rid: Optional[int] = None):
        """Device originates a transaction; returns (verdict, transaction)."""
        rid = dev.rid if rid is None else rid
        envelope = None
        if t_bit:
            dev.tx_counter += 1
            envelope = Envelope(dev.link_key_id, dev.tx_counter)
        txn = PCIeTransaction(rid, t_bit, kind, ipa, payload, length or len(payload), envelope)
        return self.deliver(txn, sender=dev), txn

    def deliver(self, txn: PCIeTransaction, sender: Optional[DeviceModel] = None) -> Verdict:
        """Root-port receive path; also used for replayed/injected packets."""
        self._tap(txn)
        if not txn.t_bit:
            return Verdict.PLAINTEXT_NORMAL
        env = txn.envelope
        held = self.key_store.get(txn.rid)
        genuine_key = held is not None and env.key_id == held and env.integrity_ok
        fresh = env.counter > self.rx_counters.get(txn.rid, 0)
        ok = genuine_key and fresh
        if not self.check_keys:
            ok = True
        self.audit.append(("delivery", txn.rid, env.key_id, held, env.counter, ok,
                           sender.name if sender is not None else None))
        if not ok:
            return Verdict.DISCARD
        self.rx_counters[txn.rid] = max(env.counter, self.rx_counters.get(txn.rid, 0))
        return Verdict.DECRYPTED_OK

    def _tap(self, txn: PCIeTransaction) -> None:
        if txn.t_bit:
            visible = Sealed(txn.envelope.key_id, len(txn.payload))
        else:
            visible = txn.payload
        self.tap.append(TapRecord(txn, visible))
        self.audit.append(("tap", txn.t_bit, isinstance(visible, Sealed)))

    # -- outbound traffic (MMIO, completions) -------------------------------
    def host_send(self, rid: int, kind: TxnKind, offset: int, payload: bytes = b"") -> DeviceModel:
        """Root port seals a host->device packet with the rid's key; device must open it."""
        key = self.key_store.get(rid)
        counter = self.tx_counters.get(rid, 0) + 1
        txn = PCIeTransaction(rid, True, kind, offset, payload, len(payload),
                              Envelope(key, counter))
        self._tap(txn)
        dev = self.slots.get(rid)
        if key is None or dev is None or dev.link_key_id != key or counter <= dev.rx_counter:
            raise DiscardedAtRootPort(f"device at {format_bdf(rid)} cannot open the IDE stream")
        self.tx_counters[rid] = counter
        dev.rx_counter = counter
        return dev

    # -- device management ----------------------------------------------------
    def device_reset(self, dev: DeviceModel) -> None:
        dev.config_space = dev.reset_config()
        dev.local_mem = bytes(LOCAL_MEM_SIZE)
        dev.bar_mem = {}
        dev.link_key_id = None
        dev.tx_counter = 0
        dev.rx_counter = 0

    def spdm_attest(self, dev: DeviceModel) -> DeviceReport:
        """Collect a signed report over the device's IDE stream (blocking)."""
        if dev.identity_key is None or dev.serial is None:
            raise AttestFailed(f"{dev.name} cannot produce a signed measurement")
        held = self.key_store.get(dev.rid)
        if held is None or dev.link_key_id != held:
            raise AttestFailed(f"{dev.name} is not on the keyed IDE stream")
        config_digest = hashlib.sha256(dev.config_space).digest()
        sizes = tuple(dev.bar_bytes(i) for i in range(len(dev.bars)))
        unsigned = DeviceReport(dev.rid, dev.serial, dev.firmware_digest, config_digest,
                                dev.debug_disabled, sizes, b"")
        sig = hmac.new(dev.identity_key, unsigned.signed_bytes(), hashlib.sha256).digest()
        return DeviceReport(dev.rid, dev.serial, dev.firmware_digest, config_digest,
                            dev.debug_disabled, sizes, sig)

    def challenge(self, rid: int) -> bool:
        """Liveness check: can the device at ``rid`` still open its IDE stream?"""
        key = self.key_store.get(rid)
        dev = self.slots.get(rid)
        return key is not None and dev is not None and dev.link_key_id == key

    def clone(self) -> "PcieFabric":
        new = PcieFabric.__new__(PcieFabric)
        new.anchor = self.anchor
        new.slots = {k: d.clone() for k, d in self.slots.items()}
        new.key_store = dict(self.key_store)
        new.rx_counters = dict(self.rx_counters)
        new.tx_counters = dict(self.tx_counters)
        new.tap = list(self.tap)
        new.next_key = self.next_key
        new.check_keys = self.check_keys
        new.audit = []
        return new
