"""Invariant checker over a :class:`~acaisim.system.System` snapshot plus its audit stream.

Snapshot checks look at the current tables. Audit checks look at what happened
during the last step (every memory access, GPT change, translation and link
delivery is recorded by the module that performed it), which is how
properties such as scrub-on-reclaim or TLB coherence are observed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .pcie_fabric import format_bdf
from .smmu import PAGE_MASK
from .world_memory import GRANULE_SHIFT, GRANULE_SIZE, World, access_allowed

INVARIANTS = ("I1", "I2", "I3", "I4", "I5")
PROPERTIES = ("gpc_soundness", "scrub_on_reclaim", "generation_monotonic", "encryption_opacity",
              "link_opacity", "registry_ste_coherence", "tlb_coherence", "root_only_smmu",
              "smmu_config_locked", "realm_tables_in_root")
CHECKS = INVARIANTS + PROPERTIES


@dataclass(frozen=True)
class Violation:
    check: str
    step: Optional[int]
    witness: tuple

    def __str__(self):
        where = f" at step {self.step}" if self.step is not None else ""
        return f"{self.check}{where}: {self.witness}"


@dataclass
class InvariantReport:
    step: Optional[int] = None
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def failed(self) -> set[str]:
        return {v.check for v in self.violations}

    def status(self) -> dict[str, str]:
        bad = self.failed()
        return {name: ("fail" if name in bad else "pass") for name in CHECKS}

    def add(self, check: str, *witness) -> None:
        self.violations.append(Violation(check, self.step, witness))


def _injective(pairs: Iterable[tuple[object, int]]):
    """Yield (pa, owner_a, owner_b) for every PA reached from two owners."""
    seen: dict[int, object] = {}
    for owner, pa in pairs:
        if pa in seen and seen[pa] != owner:
            yield pa, seen[pa], owner
        else:
            seen.setdefault(pa, owner)


def check_state(system, report: InvariantReport) -> None:
    mon = system.monitor
    rmm = system.rmm
    smmu = system.smmu
    mem = system.memory

    # I1: identity
    rids = {}
    for sid, entry in mon.registry.items():
        if entry.report is None or not system.anchor.verify(entry.report):
            report.add("I1", "unverified device", sid)
        elif entry.report.rid != entry.rid:
            report.add("I1", "report rid mismatch", sid, entry.report.rid)
        if entry.rid in rids:
            report.add("I1", "rid bound twice", format_bdf(entry.rid), rids[entry.rid], sid)
        rids[entry.rid] = sid
        if sid != entry.rid:
            report.add("I1", "stream id differs from rid", sid, entry.rid)

    # I2: exclusive ownership
    owners: dict[int, int] = {}
    for sid, entry in mon.registry.items():
        if entry.vmid in owners:
            report.add("I2", "realm owns two devices", entry.vmid, owners[entry.vmid], sid)
        owners[entry.vmid] = sid
        realm = rmm.realms.get(entry.vmid)
        if realm is None:
            report.add("I2", "device bound to missing realm", sid, entry.vmid)
            continue
        if realm.attached_device != sid:
            report.add("I2", "realm does not know its device", entry.vmid, sid)
        cfg = entry.config_space_pa & PAGE_MASK
        if cfg not in realm.stage2.values():
            report.add("I2", "config space not mapped by owner", sid, hex(cfg))
        for base, size in entry.bar_regions:
            for off in range(0, size, GRANULE_SIZE):
                if (base + off) & PAGE_MASK not in realm.stage2:
                    report.add("I2", "BAR page not mapped by owner", sid, hex(base + off))
        dev_pas = {cfg} | {realm.stage2[(b + o) & PAGE_MASK]
                           for b, s in entry.bar_regions for o in range(0, s, GRANULE_SIZE)
                           if (b + o) & PAGE_MASK in realm.stage2}
        for other in rmm.realms.values():
            if other.vmid != entry.vmid:
                for pa in dev_pas & set(other.stage2.values()):
                    report.add("I2", "device granule mapped by another realm", hex(pa), other.vmid)
    for vmid, realm in rmm.realms.items():
        if realm.attached_device is not None:
            entry = mon.registry.get(realm.attached_device)
            if entry is None or entry.vmid != vmid:
                report.add("I2", "realm claims unregistered device", vmid, realm.attached_device)

    # I3: owner binding, device view equals realm view
    for (is_realm, sid), table in smmu.s2.items():
        if not is_realm or not table:
            continue
        entry = mon.registry.get(sid)
        realm = rmm.realms.get(entry.vmid) if entry else None
        if realm is None:
            report.add("I3", "realm stream table without owner", sid, len(table))
            continue
        for ipa, pa in table.items():
            if realm.stage2.get(ipa) != pa:
                report.add("I3", "device mapping not mirrored", sid, hex(ipa), hex(pa),
                           realm.stage2.get(ipa))

    # I4: a PA appears in at most one realm stage-2 slot
    pairs = [((vmid, ipa), pa) for vmid, r in sorted(rmm.realms.items())
             for ipa, pa in sorted(r.stage2.items())]
    for pa, a, b in _injective(pairs):
        report.add("I4", hex(pa), a, b)

    # I5: a PA appears in at most one SMMU stage-2 slot
    pairs = [((tid, ipa), pa) for tid, t in sorted(smmu.s2.items())
             for ipa, pa in sorted(t.items())]
    for pa, a, b in _injective(pairs):
        report.add("I5", hex(pa), a[0][1], b[0][1])

    # module properties visible in the snapshot
    if set(smmu.realm_ste) != set(mon.registry):
        report.add("registry_ste_coherence", sorted(smmu.realm_ste), sorted(mon.registry))
    if any(ste.ats_enabled for ste in (*smmu.realm_ste.values(), *smmu.normal_ste.values())):
        report.add("smmu_config_locked", "ATS enabled on a stream")
    if mon.booted:
        cfg = smmu.config
        if not cfg["smmu_enable"] or cfg["stage2_bypass"] or not cfg["gpc_enable"] \
                or any(k.startswith("ats") and v for k, v in cfg.items()):
            locked = ("smmu_enable", "stage2_bypass", "gpc_enable")
            report.add("smmu_config_locked", {k: cfg[k] for k in locked})
        for name, pa in smmu.table_granules.items():
            if mem.world(pa) is not World.ROOT:
                report.add("realm_tables_in_root", name, hex(pa), mem.world(pa).name)


def check_audit(system, audit: Iterable[tuple], report: InvariantReport,
                last_generation: Optional[int] = None) -> Optional[int]:
    """Trace-level checks over one step's audit records. Returns the latest generation."""
    gen = last_generation
    for rec in audit:
        tag = rec[0]
        if tag == "access":
            _, kind, world, gworld, idx = rec
            if not access_allowed(world, gworld):
                report.add("gpc_soundness", kind.value, world.name, gworld.name, idx)
        elif tag == "world":
            _, idx, old, new, is_zero, g = rec
            if old is World.REALM and new is not World.REALM and not is_zero:
                report.add("scrub_on_reclaim", idx, old.name, new.name)
            if gen is not None and g <= gen:
                report.add("generation_monotonic", gen, g)
            gen = g
        elif tag == "read":
            _, idx, key, granule_tag, plain = rec
            if granule_tag is not None and granule_tag != key and plain:
                report.add("encryption_opacity", idx, key, granule_tag)
        elif tag == "translate":
            _, tid, page, cached, fresh = rec
            if cached is not None and cached != fresh:
                report.add("tlb_coherence", tid, hex(page), hex(cached),
                           None if fresh is None else hex(fresh))
        elif tag == "smmu_write":
            if rec[1] is not World.ROOT:
                report.add("root_only_smmu", rec[1].name, rec[2])
        elif tag == "delivery":
            _, rid, env_key, held, counter, ok, sender = rec
            if ok and (held is None or env_key != held):
                report.add("I1", "packet accepted under wrong key", format_bdf(rid), sender)
        elif tag == "tap":
            _, t_bit, sealed = rec
            if t_bit and not sealed:
                report.add("link_opacity", "realm payload visible on the link")
    if gen is not None and system.memory.generation < gen:
        report.add("generation_monotonic", gen, system.memory.generation)
    return gen


class InvariantChecker:
    """Stateful wrapper that drains the audit stream after each step."""

    def __init__(self):
        self.generation: Optional[int] = None

    def check(self, system, step: Optional[int] = None) -> InvariantReport:
        report = InvariantReport(step)
        gen = check_audit(system, system.drain_audit(), report, self.generation)
        self.generation = max(gen or 0, system.memory.generation)
        check_state(system, report)
        return report


def check_invariants(system, step: Optional[int] = None) -> InvariantReport:
    return InvariantChecker().check(system, step)


def inject_duplicate_stream_pa(system, pa: int, sid_a: int, sid_b: int) -> None:
    """Test-only backdoor: map ``pa`` for two streams directly, skipping the monitor."""
    page = pa & PAGE_MASK
    for i, sid in enumerate((sid_a, sid_b)):
        system.smmu.s2.setdefault((False, sid), {})[i << GRANULE_SHIFT] = page
