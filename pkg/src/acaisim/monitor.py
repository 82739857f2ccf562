"""Root-world firmware: GPT owner, SMMU owner, realm device registry, IDE keys.

The SMC surface is :meth:`Monitor.smc_device_attach`,
:meth:`Monitor.smc_delegate_prot_mem` and :meth:`Monitor.smc_smmu_request`.
The hypervisor never writes SMMU state itself; it asks through
``smc_smmu_request`` and the monitor only performs writes for non-realm
streams and allow-listed configuration fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .config import Knobs
from .errors import (AcaiError, AtsDenied, AttestFailed, DoubleMap, FieldDenied, IpaInUse,
                     NotOwner, PaOwnedByOtherDevice, RealmStreamDenied, StreamIdTaken,
                     VmAlreadyHasDevice, WrongWorld)
from .pcie_fabric import ConfigImage, DeviceReport, PcieFabric, format_bdf
from .smmu import PAGE_MASK, Smmu, StreamTableEntry
from .world_memory import (GRANULE_SHIFT, MONITOR, AccessorCtx, AccessorKind, Op,
                           PhysicalMemory, World)

REGISTRY_ENTRY = struct.Struct("<HHHBB")   # sid, vmid, config granule, n_bars, flags

SMMU_ALLOW_LIST = frozenset({
    "event_queue_threshold", "nonrealm_stage2_base", "fault_record_config"})
SMMU_NEVER_ALLOWED = frozenset({"smmu_enable", "stage2_bypass", "gpc_enable", "ats_enable",
                                "realm_stream_table_base", "gpt_base"})


@dataclass(frozen=True)
class RegistryEntry:
    stream_id: int
    vmid: int
    rid: int
    config_space_pa: int
    bar_regions: tuple[tuple[int, int], ...]
    report: Optional[DeviceReport]

    def pack(self) -> bytes:
        return REGISTRY_ENTRY.pack(self.stream_id, self.vmid,
                                   self.config_space_pa >> GRANULE_SHIFT,
                                   len(self.bar_regions), 1)

    @staticmethod
    def unpack(blob: bytes) -> tuple[int, int, int, int]:
        sid, vmid, cfg_granule, n_bars, _ = REGISTRY_ENTRY.unpack(blob)
        return sid, vmid, cfg_granule << GRANULE_SHIFT, n_bars


# hypervisor requests through the monitor's SMMU interface
@dataclass(frozen=True)
class MapStage2:
    stream_id: int
    ipa: int
    pa: int


@dataclass(frozen=True)
class UnmapStage2:
    stream_id: int
    ipa: int


@dataclass(frozen=True)
class WriteSte:
    stream_id: int
    valid: bool = True
    ats_enabled: bool = False


@dataclass(frozen=True)
class WriteConfig:
    field: str
    value: object


SmmuHypRequest = Union[MapStage2, UnmapStage2, WriteSte, WriteConfig]


class ReversePaMap:
    """PA page -> owner. ``realm`` for realm stage-2 maps, ``stream`` for SMMU maps."""

    def __init__(self):
        self.realm: dict[int, int] = {}
        self.stream: dict[int, tuple[bool, int]] = {}

    def clone(self) -> "ReversePaMap":
        new = ReversePaMap()
        new.realm = dict(self.realm)
        new.stream = dict(self.stream)
        return new


def _noop_log(actor, op, args, result):
    pass


class Monitor:
    def __init__(self, memory: PhysicalMemory, smmu: Smmu, fabric: PcieFabric,
                 reverse: ReversePaMap, knobs: Knobs = Knobs()):
        self.memory = memory
        self.smmu = smmu
        self.fabric = fabric
        self.reverse = reverse
        self.knobs = knobs
        self.registry: dict[int, RegistryEntry] = {}
        self.locked = False
        self.booted = False
        self.log: Callable = _noop_log
        # RMM-supplied resolver used to cross-check (ipa, pa) pairs
        self.resolve: Callable[[int, int], Optional[int]] = lambda vmid, ipa: None

    # ------------------------------------------------------------ boot
    def boot_init(self) -> None:
        n = self.memory.n_granules
        names = ("stream_table", "stage2_tables", "command_queue", "event_queue")
        for i, name in enumerate(names):
            pa = (n - len(names) + i) << GRANULE_SHIFT
            self.memory.gpt_set_world(pa, World.ROOT, MONITOR)
            self.smmu.table_granules[name] = pa
        if not self.booted:
            self.smmu.config_write("smmu_enable", True, MONITOR)
            self.smmu.config_write("stage2_bypass", False, MONITOR)
            self.smmu.config_write("realm_stream_table_base",
                                   self.smmu.table_granules["stream_table"], MONITOR)
        self.booted = True
        self.log("monitor", "boot_init", {}, "ok")

    def root_granules(self) -> set[int]:
        return set(self.smmu.table_granules.values())

    # ------------------------------------------------------------ attach / detach
    def entry_for_vmid(self, vmid: int) -> Optional[RegistryEntry]:
        for entry in self.registry.values():
            if entry.vmid == vmid:
                return entry
        return None

    def smc_device_attach(self, vmid: int, bus_addr: int, config_space_pa: int,
                          bar_regions=(), *, detach: bool = False,
                          realm_key: Optional[int] = None) -> Optional[DeviceReport]:
        if detach:
            return self._detach(vmid)
        args = {"vmid": vmid, "bus": format_bdf(bus_addr), "config_pa": config_space_pa}
        result = "ok"
        self.locked = True
        self.log("monitor", "stream_table_lock", args, "ok")
        keyed_rid = None
        try:
            dev = self.fabric.probe(bus_addr)
            self.log("monitor", "bus_probe", args, "ok")
            sid = rid = dev.rid
            if self.knobs.registry_exclusive:
                if sid in self.registry:
                    raise StreamIdTaken(f"stream {sid:#x} already bound to realm "
                                        f"{self.registry[sid].vmid}")
                if self.entry_for_vmid(vmid) is not None:
                    raise VmAlreadyHasDevice(f"realm {vmid} already owns a device")
            self.fabric.device_reset(dev)
            self.log("monitor", "device_reset", args, "ok")
            self.fabric.ide_program_key(rid, MONITOR)
            keyed_rid = rid
            self.log("monitor", "ide_program_key", args, "ok")
            report = self._attest(dev)
            self.log("monitor", "spdm_attest", args, "ok")
            image = ConfigImage.decode(dev.config_space)
            self.log("monitor", "config_read", args, "ok")
            bases = [ipa for ipa, _ in bar_regions]
            merged = ConfigImage(image.rid,
                                 tuple((bases[i] if i < len(bases) else 0, size)
                                       for i, (_, size) in enumerate(image.bars)),
                                 image.firmware_digest, image.debug_disabled)
            writer = AccessorCtx(AccessorKind.CORE, World.ROOT, mec_key_id=realm_key)
            self.memory.mem_access(writer, config_space_pa, Op.WRITE, merged.encode())
            self.log("monitor", "config_write", args, "ok")
            self.smmu.s2_clear(sid, MONITOR, realm=True)
            self.smmu.ste_write(sid, StreamTableEntry(sid, True, World.REALM, (True, sid), False),
                                MONITOR, realm=True)
            self.log("monitor", "ste_create", args, "ok")
            self.registry[sid] = RegistryEntry(sid, vmid, rid, config_space_pa,
                                               tuple(bar_regions), report)
            self.log("monitor", "registry_record", args, "ok")
            return report
        except AcaiError as exc:
            result = exc.name
            if keyed_rid is not None:
                self.fabric.ide_erase_key(keyed_rid, MONITOR)
            raise
        finally:
            self.locked = False
            self.log("monitor", "stream_table_unlock", args, "ok")
            self.log("rmm", "smc_device_attach", args, result)

    def _attest(self, dev) -> Optional[DeviceReport]:
        if not self.knobs.attestation:
            try:
                return self.fabric.spdm_attest(dev)
            except AttestFailed:
                return None
        report = self.fabric.spdm_attest(dev)
        if not self.fabric.anchor.verify(report):
            raise AttestFailed(f"report from {dev.name} does not verify")
        return report

    def _detach(self, vmid: int) -> None:
        entry = self.entry_for_vmid(vmid)
        if entry is None:
            return None
        sid = entry.stream_id
        del self.registry[sid]
        self.smmu.ste_write(sid, None, MONITOR, realm=True)
        for pa in self.smmu.s2_clear(sid, MONITOR, realm=True):
            if self.reverse.stream.get(pa) == (True, sid):
                del self.reverse.stream[pa]
        self.fabric.ide_erase_key(entry.rid, MONITOR)
        self.log("monitor", "device_detach", {"vmid": vmid, "sid": sid}, "ok")
        return None

    def rechallenge(self, vmid: int) -> Optional[bool]:
        entry = self.entry_for_vmid(vmid)
        if entry is None:
            return None
        return self.fabric.challenge(entry.rid)

    # ------------------------------------------------------------ protected memory
    def check_delegate_prot_mem(self, vmid: int, stream_id: int, ipa: int, pa: int) -> None:
        entry = self.registry.get(stream_id)
        if entry is None or entry.vmid != vmid:
            raise NotOwner(f"stream {stream_id:#x} is not attached to realm {vmid}")
        if self.memory.world(pa) is not World.REALM:
            raise WrongWorld(f"pa {pa:#x} is not realm memory")
        page = pa & PAGE_MASK
        if self.knobs.reverse_map:
            owner = self.reverse.stream.get(page)
            if owner is not None and owner != (True, stream_id):
                raise PaOwnedByOtherDevice(f"pa {pa:#x} already mapped for stream {owner[1]:#x}")
            if owner is not None:
                raise DoubleMap(f"pa {pa:#x} already mapped for this stream")
        if (ipa & PAGE_MASK) in self.smmu.table(stream_id, realm=True):
            raise IpaInUse(f"ipa {ipa:#x} already mapped for stream {stream_id:#x}")
        if self.resolve(vmid, ipa) != page:
            raise NotOwner(f"realm {vmid} does not map ipa {ipa:#x} to pa {pa:#x}")

    def smc_delegate_prot_mem(self, vmid: int, stream_id: int, ipa: int, pa: int,
                              *, op: str = "smc_delegate_prot_mem") -> None:
        args = {"vmid": vmid, "sid": stream_id, "ipa": ipa, "pa": pa}
        self.check_delegate_prot_mem(vmid, stream_id, ipa, pa)
        self.smmu.s2_write(stream_id, ipa, pa, MONITOR, realm=True)
        self.reverse.stream[pa & PAGE_MASK] = (True, stream_id)
        self.log("monitor", op, args, "ok")

    # ------------------------------------------------------------ hypervisor SMMU interface
    def is_realm_stream(self, stream_id: int) -> bool:
        return stream_id in self.registry or stream_id in self.smmu.realm_ste

    def smc_smmu_request(self, request: SmmuHypRequest) -> None:
        try:
            self._smmu_request(request)
        except AcaiError as exc:
            self.log("hypervisor", "smc_smmu_request", {"request": repr(request)}, exc.name)
            raise
        self.log("hypervisor", "smc_smmu_request", {"request": repr(request)}, "ok")

    def _smmu_request(self, request: SmmuHypRequest) -> None:
        if isinstance(request, WriteConfig):
            if request.field.startswith("ats"):
                raise AtsDenied("ATS can never be enabled")
            if request.field not in SMMU_ALLOW_LIST:
                raise FieldDenied(f"{request.field} is not hypervisor-writable")
            self.smmu.config_write(request.field, request.value, MONITOR)
            return
        if isinstance(request, WriteSte) and request.ats_enabled:
            raise AtsDenied("ATS can never be enabled")
        realm = self.is_realm_stream(request.stream_id)
        if realm and self.knobs.realm_stream_guard:
            raise RealmStreamDenied(f"stream {request.stream_id:#x} belongs to a realm")
        if isinstance(request, WriteSte):
            ste = StreamTableEntry(request.stream_id, request.valid,
                                   World.REALM if realm else World.NORMAL,
                                   (realm, request.stream_id), False)
            self.smmu.ste_write(request.stream_id, ste, MONITOR, realm=realm)
        elif isinstance(request, MapStage2):
            tid = (realm, request.stream_id)
            page = request.pa & PAGE_MASK
            old = self.smmu.table(request.stream_id, realm=realm).get(request.ipa & PAGE_MASK)
            if self.knobs.reverse_map:
                owner = self.reverse.stream.get(page)
                if owner is not None and owner != tid:
                    raise PaOwnedByOtherDevice(f"pa {request.pa:#x} already mapped for "
                                               f"stream {owner[1]:#x}")
                if owner is not None and old != page:
                    raise DoubleMap(f"pa {request.pa:#x} already mapped at another ipa")
            if old is not None and self.reverse.stream.get(old) == tid:
                del self.reverse.stream[old]
            self.smmu.s2_write(request.stream_id, request.ipa, request.pa, MONITOR, realm=realm)
            self.reverse.stream[page] = tid
        elif isinstance(request, UnmapStage2):
            tid = (realm, request.stream_id)
            old = self.smmu.table(request.stream_id, realm=realm).get(request.ipa & PAGE_MASK)
            self.smmu.s2_write(request.stream_id, request.ipa, None, MONITOR, realm=realm)
            if old is not None and self.reverse.stream.get(old) == tid:
                del self.reverse.stream[old]
        else:
            raise TypeError(f"unknown SMMU request {request!r}")

    def clone(self, memory, smmu, fabric, reverse) -> "Monitor":
        new = Monitor.__new__(Monitor)
        new.memory = memory
        new.smmu = smmu
        new.fabric = fabric
        new.reverse = reverse
        new.knobs = self.knobs
        new.registry = dict(self.registry)
        new.locked = self.locked
        new.booted = self.booted
        new.log = _noop_log
        new.resolve = self.resolve
        return new
