"""Device-side MMU: stream tables, per-stream stage-2 tables, TLB and GPC on DMA.

Realm and non-realm streams live in separate stream tables. Which one a
transaction indexes depends on ``world_ext``: realm only when the T bit is
set and the root port decrypted the packet, normal otherwise. All table
mutation goes through :meth:`Smmu.ste_write` / :meth:`Smmu.s2_write` and
requires a Root caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .errors import DiscardedAtRootPort, NoSte, NotRoot, TranslationFault
from .pcie_fabric import PCIeTransaction, TxnKind, Verdict
from .world_memory import GRANULE_SIZE, AccessorCtx, AccessorKind, Op, PhysicalMemory, World

PAGE_MASK = ~(GRANULE_SIZE - 1)

# (realm table?, stream id)
TableId = tuple[bool, int]

DEFAULT_CONFIG = {
    "smmu_enable": True,
    "stage2_bypass": False,
    "gpc_enable": True,
    "realm_stream_table_base": 0,
    "gpt_base": 0,
    "event_queue_threshold": 0,
    "nonrealm_stage2_base": 0,
    "fault_record_config": 0,
}


@dataclass(frozen=True)
class StreamTableEntry:
    stream_id: int
    valid: bool
    world: World
    stage2_table_id: TableId
    ats_enabled: bool = False


@dataclass(frozen=True)
class MemAccessResult:
    pa: int
    world_ext: World
    data: object = None


def world_ext_for(txn: PCIeTransaction, verdict: Verdict) -> World:
    if txn.t_bit and verdict is Verdict.DECRYPTED_OK:
        return World.REALM
    return World.NORMAL


class Smmu:
    def __init__(self, memory: PhysicalMemory):
        self.memory = memory
        self.realm_ste: dict[int, StreamTableEntry] = {}
        self.normal_ste: dict[int, StreamTableEntry] = {}
        self.s2: dict[TableId, dict[int, int]] = {}
        self.tlb: dict[tuple[TableId, int], tuple[int, int]] = {}
        self.config = dict(DEFAULT_CONFIG)
        self.table_granules: dict[str, int] = {}
        self.owner_key: Callable[[int], Optional[int]] = lambda sid: None
        self.audit: list[tuple] = []
        memory.listeners.append(self.flush_streams)

    # -- root-only mutation ------------------------------------------------
    def _require_root(self, caller: AccessorCtx, what: str) -> None:
        if caller.world is not World.ROOT:
            self.audit.append(("smmu_write_denied", caller.world, what))
            raise NotRoot(f"{what} needs root world")
        self.audit.append(("smmu_write", caller.world, what))

    def ste_write(self, stream_id: int, ste: Optional[StreamTableEntry], caller: AccessorCtx,
                  *, realm: bool) -> None:
        self._require_root(caller, "ste")
        table = self.realm_ste if realm else self.normal_ste
        if ste is None:
            table.pop(stream_id, None)
        else:
            table[stream_id] = ste
        self.flush_table((realm, stream_id))

    def s2_write(self, stream_id: int, ipa: int, pa: Optional[int], caller: AccessorCtx,
                 *, realm: bool) -> None:
        """Install ``ipa -> pa`` (or remove it when ``pa`` is None)."""
        self._require_root(caller, "s2")
        tid = (realm, stream_id)
        page = ipa & PAGE_MASK
        table = self.s2.setdefault(tid, {})
        if pa is None:
            table.pop(page, None)
        else:
            table[page] = pa & PAGE_MASK
        self.tlb.pop((tid, page), None)

    def s2_clear(self, stream_id: int, caller: AccessorCtx, *, realm: bool) -> list[int]:
        self._require_root(caller, "s2")
        tid = (realm, stream_id)
        removed = list(self.s2.pop(tid, {}).values())
        self.flush_table(tid)
        return removed

    def config_write(self, field_name: str, value, caller: AccessorCtx) -> None:
        self._require_root(caller, "config")
        self.config[field_name] = value
        self.tlb.clear()

    # -- TLB ------------------------------------------------------------------
    def flush_streams(self, pa_changed: int, generation: int) -> None:
        page = pa_changed & PAGE_MASK
        stale = [k for k, (pa, _) in self.tlb.items() if pa == page]
        for k in stale:
            del self.tlb[k]

    def flush_table(self, tid: TableId) -> None:
        stale = [k for k in self.tlb if k[0] == tid]
        for k in stale:
            del self.tlb[k]

    # -- lookups ----------------------------------------------------------------
    def table(self, stream_id: int, *, realm: bool) -> dict[int, int]:
        return self.s2.get((realm, stream_id), {})

    def lookup_ste(self, stream_id: int, world_ext: World) -> StreamTableEntry:
        table = self.realm_ste if world_ext is World.REALM else self.normal_ste
        st_pa = self.table_granules.get("stream_table")
        if st_pa is not None:
            # the SMMU reads its own tables with root-world PAS
            self.memory.gpc_check(AccessorCtx(AccessorKind.SMMU, World.ROOT), st_pa)
        ste = table.get(stream_id)
        if ste is None or not ste.valid:
            raise NoSte(f"no valid {world_ext.name.lower()} STE for stream {stream_id:#x}")
        return ste

    def walk(self, ste: StreamTableEntry, ipa: int) -> int:
        tid = ste.stage2_table_id
        page = ipa & PAGE_MASK
        fresh = self.s2.get(tid, {}).get(page)
        cached = self.tlb.get((tid, page))
        self.audit.append(("translate", tid, page, cached[0] if cached else None, fresh))
        if cached is not None:
            return cached[0] | (ipa & ~PAGE_MASK)
        if fresh is None:
            raise TranslationFault(f"stream {ste.stream_id:#x} has no mapping for ipa {ipa:#x}")
        self.tlb[(tid, page)] = (fresh, self.memory.generation)
        return fresh | (ipa & ~PAGE_MASK)

    def translate_transaction(self, txn: PCIeTransaction, verdict: Verdict) -> MemAccessResult:
        if verdict is Verdict.DISCARD:
            raise DiscardedAtRootPort(f"packet claiming rid {txn.rid:#x} failed to decrypt")
        world_ext = world_ext_for(txn, verdict)
        ste = self.lookup_ste(txn.rid, world_ext)
        if self.config.get("stage2_bypass"):
            pa = txn.ipa
        else:
            pa = self.walk(ste, txn.ipa)
        key = self.owner_key(txn.rid) if world_ext is World.REALM else None
        ctx = AccessorCtx(AccessorKind.SMMU, world_ext, mec_key_id=key)
        if txn.kind is TxnKind.DMA_WRITE:
            self.memory.mem_access(ctx, pa, Op.WRITE, txn.payload)
            return MemAccessResult(pa, world_ext)
        data = self.memory.mem_access(ctx, pa, Op.READ, length=txn.length)
        return MemAccessResult(pa, world_ext, data)

    def clone(self, memory: PhysicalMemory) -> "Smmu":
        new = Smmu.__new__(Smmu)
        new.memory = memory
        new.realm_ste = dict(self.realm_ste)
        new.normal_ste = dict(self.normal_ste)
        new.s2 = {k: dict(v) for k, v in self.s2.items()}
        new.tlb = dict(self.tlb)
        new.config = dict(self.config)
        new.table_granules = dict(self.table_granules)
        new.owner_key = self.owner_key
        new.audit = []
        memory.listeners.append(new.flush_streams)
        return new
