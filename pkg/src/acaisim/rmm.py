"""Realm management: realm VMs, their stage-2 maps, measurement and attestation.

The RMM is the only path by which memory enters a realm (``rmi_data_create``)
and the only path by which a realm asks for device access to its memory
(``rsi_delegate_prot_mem``). It resolves every (ipa, pa) pair it hands to the
monitor through the realm's own stage-2 table, which is what keeps the device
view and the realm view identical.

Measurement is a SHA-256 chain over fixed-width little-endian log entries::

    rim' = sha256(rim || kind:u8 || ipa:u64 || content_digest[32] || params_digest[32])
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .config import SystemConfig
from .errors import (AcaiError, AttachIncomplete, BarNotMapped, ConfigNotRealm, DoubleMap,
                     IpaInUse, NotActive, NotOwner, RealmActive, ResourceExhausted, StillMapped,
                     TranslationFault, UnknownVm, Unmapped, WrongWorld)
from .monitor import Monitor, ReversePaMap
from .pcie_fabric import DeviceReport, TrustAnchor
from .smmu import PAGE_MASK
from .world_memory import (GRANULE_SIZE, MONITOR, MecKeyStore, Op, PhysicalMemory, World,
                           realm_core)

ZERO_DIGEST = bytes(32)


class RealmState(enum.Enum):
    NEW = "new"
    ACTIVE = "active"
    DESTROYED = "destroyed"


class LogKind(enum.IntEnum):
    DATA = 0
    ATTACH = 1
    PREMAP = 2


@dataclass(frozen=True)
class LogEntry:
    kind: LogKind
    ipa: int
    content_digest: bytes = ZERO_DIGEST
    params_digest: bytes = ZERO_DIGEST

    def serialize(self) -> bytes:
        return struct.pack("<BQ", self.kind, self.ipa) + self.content_digest + self.params_digest


def extend(rim: bytes, entry: LogEntry) -> bytes:
    return hashlib.sha256(rim + entry.serialize()).digest()


@dataclass(frozen=True)
class DevParams:
    bus_addr: int
    bars: tuple[tuple[int, int], ...] = ()     # (ipa, size in bytes) as declared by the hypervisor

    def digest(self) -> bytes:
        blob = struct.pack("<HB", self.bus_addr, len(self.bars))
        blob += b"".join(struct.pack("<QQ", ipa, size) for ipa, size in self.bars)
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class ScatterGatherList:
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for ipa, size in self.entries:
            if ipa % GRANULE_SIZE or size <= 0 or size % GRANULE_SIZE:
                raise ValueError(f"entry ({ipa:#x}, {size}) is not granule aligned")

    @classmethod
    def of(cls, *entries: tuple[int, int]) -> "ScatterGatherList":
        return cls(tuple(entries))

    def pages(self) -> list[int]:
        return [ipa + off for ipa, size in self.entries for off in range(0, size, GRANULE_SIZE)]


@dataclass
class RealmVM:
    vmid: int
    name: str
    mec_key_id: int
    state: RealmState = RealmState.NEW
    stage2: dict[int, int] = field(default_factory=dict)
    measurement: bytes = ZERO_DIGEST
    data_log: tuple[LogEntry, ...] = ()
    attached_device: Optional[int] = None
    attach_pending: bool = False
    device_report: Optional[DeviceReport] = None
    bar_layout: tuple[tuple[int, int], ...] = ()
    device_ipas: frozenset[int] = frozenset()

    def record(self, entry: LogEntry) -> None:
        self.measurement = extend(self.measurement, entry)
        self.data_log = self.data_log + (entry,)

    def clone(self) -> "RealmVM":
        new = object.__new__(RealmVM)
        new.__dict__.update(self.__dict__)
        new.stage2 = dict(self.stage2)
        return new


@dataclass(frozen=True)
class AttestationReport:
    realm_measurement: bytes
    data_log: tuple[LogEntry, ...]
    device_section: Optional[DeviceReport]
    bar_layout: tuple[tuple[int, int], ...]
    device_live: Optional[bool] = None


@dataclass(frozen=True)
class Policy:
    """Verifier expectations. ``None`` fields are not checked."""

    realm_measurement: Optional[bytes] = None
    firmware_digest: Optional[bytes] = None
    bar_sizes: Optional[tuple[int, ...]] = None
    require_device: bool = True

    @classmethod
    def parse(cls, text: str) -> "Policy":
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        unknown = set(values) - {"realm_measurement", "firmware_digest", "bar_sizes",
                                 "require_device"}
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        bars = values.get("bar_sizes")
        return cls(
            realm_measurement=bytes.fromhex(values["realm_measurement"])
            if "realm_measurement" in values else None,
            firmware_digest=bytes.fromhex(values["firmware_digest"])
            if "firmware_digest" in values else None,
            bar_sizes=tuple(int(x) for x in bars.split(",") if x) if bars is not None else None,
            require_device=values.get("require_device", "1") not in ("0", "false", "no"),
        )

    def dump(self) -> str:
        lines = []
        if self.realm_measurement is not None:
            lines.append(f"realm_measurement={self.realm_measurement.hex()}")
        if self.firmware_digest is not None:
            lines.append(f"firmware_digest={self.firmware_digest.hex()}")
        if self.bar_sizes is not None:
            lines.append("bar_sizes=" + ",".join(str(s) for s in self.bar_sizes))
        lines.append(f"require_device={1 if self.require_device else 0}")
        return "\n".join(lines) + "\n"


# every reason verify_report can give for a Fail
FAIL_REASONS = ("NoDeviceSection", "BadSignature", "FirmwareMismatch", "DebugEnabled",
                "BarMismatch", "BarNotProtected", "SessionBroken", "MeasurementMismatch")


@dataclass(frozen=True)
class VerifyResult:
    passed: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.passed


def verify_report(report: AttestationReport, policy: Policy,
                  anchor: TrustAnchor) -> VerifyResult:
    """Remote verifier. Device checks come first so the failure names the device problem."""
    section = report.device_section
    if section is None:
        if policy.require_device:
            return VerifyResult(False, "NoDeviceSection")
    else:
        if not anchor.verify(section):
            return VerifyResult(False, "BadSignature")
        if policy.firmware_digest is not None and section.firmware_digest != policy.firmware_digest:
            return VerifyResult(False, "FirmwareMismatch")
        if not section.debug_disabled:
            return VerifyResult(False, "DebugEnabled")
        declared = tuple(size for _, size in report.bar_layout)
        if declared != section.bar_sizes or (
                policy.bar_sizes is not None and declared != policy.bar_sizes):
            return VerifyResult(False, "BarMismatch")
        logged = {e.ipa for e in report.data_log if e.kind is not LogKind.PREMAP}
        for ipa, size in report.bar_layout:
            if any(ipa + off not in logged for off in range(0, size, GRANULE_SIZE)):
                return VerifyResult(False, "BarNotProtected")
        if report.device_live is False:
            return VerifyResult(False, "SessionBroken")
    wanted = policy.realm_measurement
    if wanted is not None and report.realm_measurement != wanted:
        return VerifyResult(False, "MeasurementMismatch")
    return VerifyResult(True)


def replay_measurement(data_log: Iterable[LogEntry]) -> bytes:
    rim = ZERO_DIGEST
    for entry in data_log:
        rim = extend(rim, entry)
    return rim


class Rmm:
    def __init__(self, memory: PhysicalMemory, monitor: Monitor, reverse: ReversePaMap,
                 mec: MecKeyStore, config: SystemConfig = SystemConfig()):
        self.memory = memory
        self.monitor = monitor
        self.reverse = reverse
        self.mec = mec
        self.config = config
        self.realms: dict[int, RealmVM] = {}
        self.names: dict[str, int] = {}
        self.next_vmid = 0
        self.log = lambda actor, op, args, result: None
        monitor.resolve = self.resolve

    # ------------------------------------------------------------ helpers
    def realm(self, vmid: int) -> RealmVM:
        try:
            return self.realms[vmid]
        except KeyError:
            raise UnknownVm(f"no realm {vmid}") from None

    def resolve(self, vmid: int, ipa: int) -> Optional[int]:
        realm = self.realms.get(vmid)
        if realm is None:
            return None
        return realm.stage2.get(ipa & PAGE_MASK)

    def _ctx(self, realm: RealmVM):
        return realm_core(realm.vmid, realm.mec_key_id)

    def is_mapped(self, page: int) -> bool:
        return page in self.reverse.realm or page in self.reverse.stream

    # ------------------------------------------------------------ RMI (hypervisor)
    def rmi_realm_create(self, name: str) -> int:
        if name in self.names or len(self.realms) >= self.config.max_realms:
            raise ResourceExhausted(f"cannot create realm {name!r}")
        vmid = self.next_vmid
        self.next_vmid += 1
        self.realms[vmid] = RealmVM(vmid, name, self.mec.allocate(vmid))
        self.names[name] = vmid
        self.log("hypervisor", "rmi_realm_create", {"name": name}, "ok")
        return vmid

    def rmi_granule_delegate(self, pa: int) -> None:
        world = self.memory.world(pa)
        if world is not World.NORMAL:
            raise WrongWorld(f"pa {pa:#x} is {world.name}, not NORMAL")
        if self.is_mapped(pa & PAGE_MASK):
            raise StillMapped(f"pa {pa:#x} is still mapped")
        self.memory.scrub(pa, MONITOR)
        self.memory.gpt_set_world(pa, World.REALM, MONITOR)
        self.log("hypervisor", "rmi_granule_delegate", {"pa": pa}, "ok")

    def rmi_granule_undelegate(self, pa: int) -> None:
        world = self.memory.world(pa)
        if world is not World.REALM:
            raise WrongWorld(f"pa {pa:#x} is {world.name}, not REALM")
        if self.is_mapped(pa & PAGE_MASK):
            raise StillMapped(f"pa {pa:#x} is still attached")
        self.memory.scrub(pa, MONITOR)
        self.memory.gpt_set_world(pa, World.NORMAL, MONITOR)
        self.log("hypervisor", "rmi_granule_undelegate", {"pa": pa}, "ok")

    def rmi_data_create(self, vmid: int, src_pa: int, dst_pa: int, ipa: int,
                        attach_dev: bool = False, dev_params: Optional[DevParams] = None) -> None:
        realm = self.realm(vmid)
        if realm.state is not RealmState.NEW:
            raise RealmActive(f"realm {vmid} is {realm.state.value}")
        if attach_dev:
            if dev_params is None:
                raise ValueError("attach_dev needs device parameters")
            if self.memory.world(dst_pa) is not World.REALM:
                raise ConfigNotRealm(f"config space pa {dst_pa:#x} is not realm memory")
        if self.memory.world(src_pa) is not World.NORMAL:
            raise WrongWorld(f"source {src_pa:#x} must be normal memory")
        if self.memory.world(dst_pa) is not World.REALM:
            raise WrongWorld(f"destination {dst_pa:#x} must be delegated first")
        dst = dst_pa & PAGE_MASK
        page = ipa & PAGE_MASK
        if self.config.knobs.rmm_double_map and dst in self.reverse.realm:
            raise DoubleMap(f"pa {dst_pa:#x} already mapped by realm {self.reverse.realm[dst]}")
        if page in realm.stage2:
            raise IpaInUse(f"ipa {ipa:#x} already mapped in realm {vmid}")
        if attach_dev:
            for bar_ipa, size in dev_params.bars:
                for off in range(0, max(size, 1), GRANULE_SIZE):
                    if (bar_ipa + off) & PAGE_MASK not in realm.stage2:
                        raise BarNotMapped(f"BAR page {bar_ipa + off:#x} not mapped "
                                           f"in realm {vmid}")

        ctx = self._ctx(realm)
        content = self.memory.mem_access(ctx, src_pa, Op.READ)
        saved = (realm.clone(), self.memory.contents.get(dst >> 12),
                 self.memory.tags.get(dst >> 12), self.reverse.realm.get(dst))
        self.memory.mem_access(ctx, dst, Op.WRITE, content)
        realm.stage2[page] = dst
        self.reverse.realm[dst] = vmid
        kind = LogKind.ATTACH if attach_dev else LogKind.DATA
        params = dev_params.digest() if attach_dev else ZERO_DIGEST
        realm.record(LogEntry(kind, page, hashlib.sha256(content).digest(), params))
        args = {"vmid": vmid, "src": src_pa, "dst": dst_pa, "ipa": ipa, "attach_dev": attach_dev}

        if not attach_dev:
            self.log("hypervisor", "rmi_data_create", args, "ok")
            if self.config.opt and realm.attached_device is not None:
                self._premap(realm, [page])
            return

        try:
            report = self.monitor.smc_device_attach(vmid, dev_params.bus_addr, dst,
                                                    dev_params.bars, realm_key=realm.mec_key_id)
        except AcaiError:
            old, contents, tag, owner = saved
            self.realms[vmid] = old
            old.attach_pending = True
            idx = dst >> 12
            if contents is None:
                self.memory.contents.pop(idx, None)
            else:
                self.memory.contents[idx] = contents
            if tag is None:
                self.memory.tags.pop(idx, None)
            else:
                self.memory.tags[idx] = tag
            if owner is None:
                self.reverse.realm.pop(dst, None)
            else:
                self.reverse.realm[dst] = owner
            raise
        realm.attached_device = dev_params.bus_addr      # stream id == rid == bus address
        realm.attach_pending = False
        realm.device_report = report
        realm.bar_layout = tuple(dev_params.bars)
        dev_pages = {page}
        for bar_ipa, size in dev_params.bars:
            dev_pages.update(bar_ipa + off for off in range(0, size, GRANULE_SIZE))
        realm.device_ipas = frozenset(dev_pages)
        self.log("hypervisor", "rmi_data_create", args, "ok")
        if self.config.opt:
            self._premap(realm, sorted(realm.stage2))

    def _premap(self, realm: RealmVM, pages: list[int]) -> None:
        """Pre-install SMMU stage-2 entries for realm memory (optimised mode)."""
        sid = realm.attached_device
        table = self.monitor.smmu.table(sid, realm=True)
        for page in pages:
            if page in realm.device_ipas or page in table:
                continue
            self.monitor.smc_delegate_prot_mem(realm.vmid, sid, page, realm.stage2[page],
                                               op="smc_premap_prot_mem")
            realm.record(LogEntry(LogKind.PREMAP, page))

    def rmi_realm_activate(self, vmid: int) -> None:
        realm = self.realm(vmid)
        if realm.state is not RealmState.NEW:
            raise RealmActive(f"realm {vmid} is {realm.state.value}")
        if realm.attach_pending:
            raise AttachIncomplete(f"device attach for realm {vmid} did not complete")
        realm.state = RealmState.ACTIVE
        self.log("hypervisor", "rmi_realm_activate", {"vmid": vmid}, "ok")

    def rmi_realm_destroy(self, vmid: int) -> None:
        realm = self.realm(vmid)
        self.monitor.smc_device_attach(vmid, 0, 0, detach=True)
        for page, pa in sorted(realm.stage2.items()):
            if self.reverse.realm.get(pa) == vmid:
                del self.reverse.realm[pa]
            self.memory.scrub(pa, MONITOR)
            self.memory.gpt_set_world(pa, World.NORMAL, MONITOR)
        realm.stage2.clear()
        realm.state = RealmState.DESTROYED
        self.mec.release(vmid)
        del self.realms[vmid]
        self.names.pop(realm.name, None)
        self.log("hypervisor", "rmi_realm_destroy", {"vmid": vmid}, "ok")

    # ------------------------------------------------------------ RSI (realm)
    def rsi_delegate_prot_mem(self, vmid: int, sg: ScatterGatherList, device: int) -> int:
        """Returns the number of SMMU entries created."""
        args = {"vmid": vmid, "sid": device, "sg": [list(e) for e in sg.entries]}
        try:
            n = self._delegate_prot_mem(vmid, sg, device)
        except AcaiError as exc:
            self.log(f"realm:{vmid}", "rsi_delegate_prot_mem", args, exc.name)
            raise
        self.log(f"realm:{vmid}", "rsi_delegate_prot_mem", args, "ok")
        return n

    def _delegate_prot_mem(self, vmid: int, sg: ScatterGatherList, device: int) -> int:
        realm = self.realm(vmid)
        if realm.state is not RealmState.ACTIVE:
            raise NotActive(f"realm {vmid} is not running")
        if realm.attached_device != device:
            raise NotOwner(f"stream {device:#x} is not attached to realm {vmid}")
        pairs = []
        seen = set()
        for page in sg.pages():
            pa = realm.stage2.get(page)
            if pa is None:
                raise Unmapped(f"ipa {page:#x} not mapped in realm {vmid}")
            if page in seen:
                raise IpaInUse(f"ipa {page:#x} listed twice")
            seen.add(page)
            pairs.append((page, pa))
        table = self.monitor.smmu.table(device, realm=True)
        if self.config.opt:
            pairs = [(ipa, pa) for ipa, pa in pairs if table.get(ipa) != pa]
        for ipa, pa in pairs:
            self.monitor.check_delegate_prot_mem(vmid, device, ipa, pa)
        for ipa, pa in pairs:
            self.monitor.smc_delegate_prot_mem(vmid, device, ipa, pa)
        return len(pairs)

    def realm_access(self, vmid: int, ipa: int, op: Op, data: Optional[bytes] = None,
                     length: Optional[int] = None):
        realm = self.realm(vmid)
        pa = realm.stage2.get(ipa & PAGE_MASK)
        if pa is None:
            raise TranslationFault(f"realm {vmid} has no mapping for ipa {ipa:#x}")
        return self.memory.mem_access(self._ctx(realm), pa | (ipa & ~PAGE_MASK), op, data, length)

    # ------------------------------------------------------------ attestation
    def attestation_report(self, vmid: int) -> AttestationReport:
        realm = self.realm(vmid)
        if realm.state is not RealmState.ACTIVE:
            raise NotActive(f"realm {vmid} is not active")
        live = self.monitor.rechallenge(vmid) if realm.attached_device is not None else None
        self.log(f"realm:{vmid}", "attestation_report", {"vmid": vmid}, "ok")
        return AttestationReport(realm.measurement, realm.data_log, realm.device_report,
                                 realm.bar_layout, live)

    def clone(self, memory, monitor, reverse, mec) -> "Rmm":
        new = Rmm.__new__(Rmm)
        new.memory = memory
        new.monitor = monitor
        new.reverse = reverse
        new.mec = mec
        new.config = self.config
        new.realms = {k: r.clone() for k, r in self.realms.items()}
        new.names = dict(self.names)
        new.next_vmid = self.next_vmid
        new.log = lambda actor, op, args, result: None
        monitor.resolve = new.resolve
        return new
