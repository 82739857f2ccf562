"""The simulation kernel: one object holding every module's state.

All mutation happens through the methods here (or the module methods they
call), one operation at a time. ``clone`` gives an independent copy for the
explorer; ``canonical``/``digest`` give a deterministic fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Union

from .config import SystemConfig
from .errors import GpcDenied, NotBarRegion, TranslationFault
from .monitor import Monitor, ReversePaMap, SmmuHypRequest
from .pcie_fabric import (LOCAL_MEM_SIZE, TRANSFORMS, DeviceModel, PcieFabric, TrustAnchor,
                          TxnKind, format_bdf, genuine_device)
from .rmm import (AttestationReport, DevParams, Policy, Rmm, ScatterGatherList, VerifyResult,
                  verify_report)
from .smmu import PAGE_MASK, MemAccessResult, Smmu
from .world_memory import (GRANULE_SIZE, HYPERVISOR, SECURE_OS, Ciphertext, MecKeyStore, Op,
                           PhysicalMemory, realm_core)


@dataclass(frozen=True)
class CallEvent:
    actor: str
    op: str
    args: dict
    result: str


DeviceRef = Union[str, int, DeviceModel]


class System:
    def __init__(self, config: SystemConfig = SystemConfig(), anchor: Optional[TrustAnchor] = None):
        self.config = config
        self.memory = PhysicalMemory(config.n_granules, config.granule_size)
        self.mec = MecKeyStore()
        self.fabric = PcieFabric(anchor)
        self.fabric.check_keys = config.knobs.ide_verdict
        self.smmu = Smmu(self.memory)
        self.reverse = ReversePaMap()
        self.monitor = Monitor(self.memory, self.smmu, self.fabric, self.reverse, config.knobs)
        self.rmm = Rmm(self.memory, self.monitor, self.reverse, self.mec, config)
        self.calls: list[CallEvent] = []
        self.record_calls = True
        self._wire()

    def _wire(self) -> None:
        def log(actor, op, args, result):
            if self.record_calls:
                self.calls.append(CallEvent(actor, op, args, result))

        self.monitor.log = log
        self.rmm.log = log
        self.smmu.owner_key = self._owner_key
        self.monitor.resolve = self.rmm.resolve

    def _owner_key(self, stream_id: int) -> Optional[int]:
        entry = self.monitor.registry.get(stream_id)
        if entry is None:
            return None
        realm = self.rmm.realms.get(entry.vmid)
        return realm.mec_key_id if realm else None

    def clone(self) -> "System":
        new = System.__new__(System)
        new.config = self.config
        new.memory = self.memory.clone()
        new.mec = self.mec.clone()
        new.fabric = self.fabric.clone()
        new.smmu = self.smmu.clone(new.memory)
        new.reverse = self.reverse.clone()
        new.monitor = self.monitor.clone(new.memory, new.smmu, new.fabric, new.reverse)
        new.rmm = self.rmm.clone(new.memory, new.monitor, new.reverse, new.mec)
        new.calls = []
        new.record_calls = self.record_calls
        new._wire()
        return new

    @property
    def anchor(self) -> TrustAnchor:
        return self.fabric.anchor

    def _log(self, actor: str, op: str, args: dict, result: str = "ok") -> None:
        if self.record_calls:
            self.calls.append(CallEvent(actor, op, args, result))

    def drain_calls(self) -> list[CallEvent]:
        calls, self.calls = self.calls, []
        return calls

    def drain_audit(self) -> list[tuple]:
        out = self.memory.audit + self.smmu.audit + self.fabric.audit
        self.memory.audit = []
        self.smmu.audit = []
        self.fabric.audit = []
        return out

    # ------------------------------------------------------------ platform
    def boot(self) -> None:
        self.monitor.boot_init()

    def plug(self, dev: DeviceModel) -> DeviceModel:
        self.fabric.plug(dev)
        self._log("platform", "plug", {"device": dev.name, "bus": format_bdf(dev.bus_addr)})
        return dev

    def add_device(self, name: str, bus_addr: int, bars=(), **kw) -> DeviceModel:
        return self.plug(genuine_device(self.anchor, name, bus_addr, bars, **kw))

    def device(self, ref: DeviceRef) -> DeviceModel:
        if isinstance(ref, DeviceModel):
            return ref
        if isinstance(ref, int):
            return self.fabric.probe(ref)
        return self.fabric.by_name(ref)

    def staging_pa(self) -> int:
        """A normal-world granule just below the SMMU tables, used as a copy source."""
        return (self.config.n_granules - self.config.smmu_granules - 1) * GRANULE_SIZE

    # ------------------------------------------------------------ hypervisor
    def delegate(self, pa: int) -> None:
        self.rmm.rmi_granule_delegate(pa)

    def undelegate(self, pa: int) -> None:
        self.rmm.rmi_granule_undelegate(pa)

    def realm_create(self, name: str) -> int:
        return self.rmm.rmi_realm_create(name)

    def data_create(self, vmid: int, src_pa: int, dst_pa: int, ipa: int,
                    dev_params: Optional[DevParams] = None) -> None:
        self.rmm.rmi_data_create(vmid, src_pa, dst_pa, ipa, dev_params is not None, dev_params)

    def activate(self, vmid: int) -> None:
        self.rmm.rmi_realm_activate(vmid)

    def destroy(self, vmid: int) -> None:
        self.rmm.rmi_realm_destroy(vmid)

    def smmu_request(self, request: SmmuHypRequest) -> None:
        self.monitor.smc_smmu_request(request)

    def hyp_access(self, pa: int, op: Op, data: Optional[bytes] = None,
                   length: Optional[int] = None):
        return self.memory.mem_access(HYPERVISOR, pa, op, data, length)

    def secure_access(self, pa: int, op: Op, data: Optional[bytes] = None,
                      length: Optional[int] = None):
        return self.memory.mem_access(SECURE_OS, pa, op, data, length)

    # ------------------------------------------------------------ realm
    def prot_mem(self, vmid: int, sg: ScatterGatherList, stream_id: int) -> int:
        return self.rmm.rsi_delegate_prot_mem(vmid, sg, stream_id)

    def realm_write(self, vmid: int, ipa: int, data: bytes) -> None:
        self.rmm.realm_access(vmid, ipa, Op.WRITE, data)

    def realm_read(self, vmid: int, ipa: int, length: int):
        return self.rmm.realm_access(vmid, ipa, Op.READ, length=length)

    def mmio(self, vmid: int, ipa: int, op: Op, data: Optional[bytes] = None,
             length: Optional[int] = None):
        realm = self.rmm.realm(vmid)
        pa = realm.stage2.get(ipa & PAGE_MASK)
        if pa is None:
            raise TranslationFault(f"realm {vmid} has no mapping for ipa {ipa:#x}")
        ctx = realm_core(vmid, realm.mec_key_id)
        if not self.memory.gpc_check(ctx, pa):
            raise GpcDenied(f"realm {vmid} denied on {pa:#x}")
        entry = self.monitor.entry_for_vmid(vmid)
        if entry is None:
            raise NotBarRegion(f"realm {vmid} has no device")
        for index, (base, size) in enumerate(entry.bar_regions):
            if base <= ipa < base + size:
                break
        else:
            raise NotBarRegion(f"ipa {ipa:#x} is not inside a BAR of realm {vmid}'s device")
        offset = ipa - base
        kind = TxnKind.MMIO_WRITE if op is Op.WRITE else TxnKind.MMIO_READ
        dev = self.fabric.host_send(entry.rid, kind, offset, data or b"")
        regs = bytearray(dev.bar_mem.get(index, bytes(size)))
        if op is Op.WRITE:
            regs[offset:offset + len(data)] = data
            dev.bar_mem[index] = bytes(regs)
            self._log(f"realm:{vmid}", "mmio_write", {"ipa": ipa, "len": len(data)})
            return None
        length = length or 8
        self._log(f"realm:{vmid}", "mmio_read", {"ipa": ipa, "len": length})
        return bytes(regs[offset:offset + length])

    def attest(self, vmid: int) -> AttestationReport:
        return self.rmm.attestation_report(vmid)

    def verify(self, report: AttestationReport, policy: Policy) -> VerifyResult:
        return verify_report(report, policy, self.anchor)

    # ------------------------------------------------------------ devices
    def dma(self, dev: DeviceRef, op: Op, ipa: int, length: int = GRANULE_SIZE, *,
            t_bit: bool = True, rid: Optional[int] = None) -> MemAccessResult:
        dev = self.device(dev)
        if op is Op.WRITE:
            verdict, txn = self.fabric.device_send(dev, TxnKind.DMA_WRITE, ipa,
                                                   payload=dev.local_mem[:length], t_bit=t_bit,
                                                   rid=rid)
        else:
            verdict, txn = self.fabric.device_send(dev, TxnKind.DMA_READ, ipa, length=length,
                                                   t_bit=t_bit, rid=rid)
        result = self.smmu.translate_transaction(txn, verdict)
        if op is Op.READ and isinstance(result.data, bytes):
            out = TRANSFORMS[dev.transform](result.data)
            dev.local_mem = (out + dev.local_mem[len(out):])[:LOCAL_MEM_SIZE]
        self._log(f"device:{dev.name}", f"dma_{op.value}",
                  {"ipa": ipa, "len": length, "t": int(t_bit), "rid": txn.rid})
        return result

    # ------------------------------------------------------------ physical attacker
    def swap_device(self, bus_addr: int, replacement: DeviceModel) -> None:
        self.fabric.unplug(bus_addr)
        replacement.bus_addr = bus_addr
        self.fabric.plug(replacement)
        self._log("physical", "swap_device",
                  {"bus": format_bdf(bus_addr), "device": replacement.name})

    def replay(self, tap_index: int = -1) -> None:
        """Re-inject a captured packet; the root port verdict decides its fate."""
        record = self.fabric.tap[tap_index]
        verdict = self.fabric.deliver(record.txn)
        self._log("physical", "replay", {"tap_index": tap_index})
        self.smmu.translate_transaction(record.txn, verdict)

    def dram_probe(self, pa: int):
        """Cold-boot style read of DRAM: stored plaintext only where no realm key applies."""
        idx = self.memory.index(pa)
        tag = self.memory.tags.get(idx)
        if tag is not None:
            return Ciphertext(tag, GRANULE_SIZE)
        return self.memory.peek(pa)

    # ------------------------------------------------------------ fingerprint
    def canonical(self) -> tuple:
        """Every piece of state that can influence a later operation, in a stable order."""
        def sha(blob):
            return hashlib.sha256(blob).digest()

        def ste_view(ste):
            return ste.valid, ste.world, ste.ats_enabled

        mem, smmu, fabric = self.memory, self.smmu, self.fabric
        realms = tuple(
            (r.vmid, r.name, r.mec_key_id, r.state.value, tuple(sorted(r.stage2.items())),
             r.measurement, r.attached_device, r.attach_pending, r.bar_layout,
             tuple(sorted(r.device_ipas)),
             r.device_report.signature if r.device_report else None)
            for _, r in sorted(self.rmm.realms.items()))
        devices = tuple(
            (bus, d.name, d.serial, d.bars, d.link_key_id, d.tx_counter, d.rx_counter,
             sha(d.local_mem), sha(d.config_space),
             tuple(sorted((i, sha(b)) for i, b in d.bar_mem.items())))
            for bus, d in sorted(fabric.slots.items()))
        registry = tuple(
            (sid, e.vmid, e.rid, e.config_space_pa, e.bar_regions,
             e.report.signature if e.report else None)
            for sid, e in sorted(self.monitor.registry.items()))
        last_tap = fabric.tap[-1].txn if fabric.tap else None
        return (
            bytes(mem.gpt), mem.generation,
            tuple(sorted((i, sha(b)) for i, b in mem.contents.items())),
            tuple(sorted(mem.tags.items())),
            realms, tuple(sorted(self.rmm.names.items())), self.rmm.next_vmid,
            tuple(sorted(self.mec.keys.items())), self.mec._next,
            registry, self.monitor.locked, self.monitor.booted,
            tuple(sorted(self.reverse.realm.items())), tuple(sorted(self.reverse.stream.items())),
            tuple(sorted((k, ste_view(v)) for k, v in smmu.realm_ste.items())),
            tuple(sorted((k, ste_view(v)) for k, v in smmu.normal_ste.items())),
            tuple(sorted((k, tuple(sorted(v.items()))) for k, v in smmu.s2.items() if v)),
            tuple(sorted(smmu.tlb.items())),
            tuple(sorted(smmu.config.items())),
            devices, tuple(sorted(fabric.key_store.items())),
            tuple(sorted(fabric.rx_counters.items())),
            tuple(sorted(fabric.tx_counters.items())), fabric.next_key,
            len(fabric.tap), repr(last_tap),
        )

    def digest(self) -> str:
        return hashlib.sha256(repr(self.canonical()).encode()).hexdigest()

    def state_key(self) -> int:
        """Fast in-process fingerprint for deduplication during exploration.

        Two states with equal keys behave identically under every operation:

        * link counters are only ever compared (``c + 1 > held``) or combined
          with ``max``, so they are replaced by their rank among all counters;
        * the GPT generation only has to grow, which the audit checks per step,
          so its absolute value is dropped (also from TLB entries);
        * of the tap only the last packet can be replayed.

        Built from unordered containers and Python's cached hashes, so it is
        not stable across processes.
        """
        mem, smmu, fabric = self.memory, self.smmu, self.fabric
        fs = frozenset
        last = fabric.tap[-1].txn if fabric.tap else None
        env = last.envelope if last is not None else None
        values = {0}
        for d in fabric.slots.values():
            values.add(d.tx_counter)
            values.add(d.rx_counter)
        values.update(fabric.rx_counters.values())
        values.update(fabric.tx_counters.values())
        if env is not None:
            values.add(env.counter)
        rank = {v: i for i, v in enumerate(sorted(values))}
        if last is not None:
            last = (last.rid, last.t_bit, last.kind, last.ipa, last.payload, last.length,
                    None if env is None else (env.key_id, rank[env.counter], env.integrity_ok))
        realms = fs(
            (r.vmid, r.name, r.mec_key_id, r.state, fs(r.stage2.items()), r.measurement,
             r.attached_device, r.attach_pending, r.bar_layout, r.device_ipas,
             r.device_report.signature if r.device_report else None)
            for r in self.rmm.realms.values())
        devices = fs(
            (bus, d.name, d.serial, d.bars, d.link_key_id, rank[d.tx_counter], rank[d.rx_counter],
             d.local_mem, d.config_space, fs(d.bar_mem.items()))
            for bus, d in fabric.slots.items())
        registry = fs(
            (sid, e.vmid, e.rid, e.config_space_pa, e.bar_regions,
             e.report.signature if e.report else None)
            for sid, e in self.monitor.registry.items())
        return hash((
            tuple(mem.gpt), fs(mem.contents.items()), fs(mem.tags.items()),
            realms, fs(self.rmm.names.items()), self.rmm.next_vmid,
            fs(self.mec.keys.items()), self.mec._next,
            registry, self.monitor.locked, self.monitor.booted,
            fs(self.reverse.realm.items()), fs(self.reverse.stream.items()),
            fs(smmu.realm_ste.items()), fs(smmu.normal_ste.items()),
            fs((k, fs(v.items())) for k, v in smmu.s2.items() if v),
            fs((k, pa) for k, (pa, _) in smmu.tlb.items()), fs(smmu.config.items()),
            devices, fs(fabric.key_store.items()),
            fs((k, rank[v]) for k, v in fabric.rx_counters.items()),
            fs((k, rank[v]) for k, v in fabric.tx_counters.items()), fabric.next_key,
            last,
        ))
