from dataclasses import replace

import pytest

from acaisim.invariants import (CHECKS, InvariantChecker, InvariantReport, check_audit,
                                check_invariants, check_state, inject_duplicate_stream_pa)
from acaisim.world_memory import AccessorKind, World

from conftest import BUF_IPA, BUS, build_attached, sg


def failed(system):
    return check_invariants(system).failed()


def test_fresh_boot_is_clean(system):
    report = check_invariants(system)
    assert report.ok, report.violations
    assert set(report.status().values()) == {"pass"}
    assert set(report.status()) == set(CHECKS)


def test_happy_path_and_delegations_clean(attached):
    system, vmid = attached
    system.prot_mem(vmid, sg((BUF_IPA, 0x1000)), BUS)
    for pa in (0x9000, 0xa000, 0xb000):
        system.delegate(pa)
    assert check_invariants(system).ok


def test_duplicate_stream_pa_is_an_i5_witness(system):
    inject_duplicate_stream_pa(system, 0x7000, 0x200, 0x300)
    report = check_invariants(system)
    assert [(v.check, v.witness) for v in report.violations] == [("I5", ("0x7000", 0x200, 0x300))]


def test_shared_realm_pa_is_an_i4_witness(system):
    a = build_attached(system, name="a")
    system.delegate(0x9000)
    b = system.realm_create("b")
    pa = system.rmm.realms[a].stage2[BUF_IPA]
    system.rmm.realms[b].stage2[0x2000] = pa
    assert "I4" in failed(system)


def test_unmirrored_device_mapping_is_i3(attached):
    system, vmid = attached
    system.smmu.s2.setdefault((True, BUS), {})[0x700000] = 0x9000
    assert "I3" in failed(system)


def test_registry_pointing_at_missing_realm_is_i2(attached):
    system, vmid = attached
    del system.rmm.realms[vmid]
    assert "I2" in failed(system)


def test_unverified_registry_entry_is_i1(attached):
    system, _ = attached
    system.monitor.registry[BUS] = replace(system.monitor.registry[BUS], report=None)
    assert "I1" in failed(system)


def test_stream_table_out_of_root_is_flagged(system):
    pa = system.smmu.table_granules["stream_table"]
    system.memory.gpt[pa >> 12] = World.NORMAL
    assert "realm_tables_in_root" in failed(system)


def test_ste_without_registry_entry(attached):
    system, _ = attached
    del system.monitor.registry[BUS]
    assert "registry_ste_coherence" in failed(system)


@pytest.mark.parametrize("record,check", [
    (("access", AccessorKind.CORE, World.NORMAL, World.REALM, 3), "gpc_soundness"),
    (("world", 3, World.REALM, World.NORMAL, False, 0), "scrub_on_reclaim"),
    (("read", 3, 1, 2, True), "encryption_opacity"),
    (("translate", (True, BUS), 0x2000, 0x8000, 0x9000), "tlb_coherence"),
    (("smmu_write", World.NORMAL, "s2"), "root_only_smmu"),
    (("delivery", BUS, 1, 2, 1, True, "acc"), "I1"),
    (("tap", True, False), "link_opacity"),
])
def test_audit_records_are_judged(system, record, check):
    report = InvariantReport(0)
    check_audit(system, [record], report)
    assert report.failed() == {check}


def test_generation_must_grow(system):
    report = InvariantReport(0)
    check_audit(system, [("world", 3, World.NORMAL, World.REALM, True, 1)], report,
                last_generation=5)
    assert "generation_monotonic" in report.failed()


def test_checker_drains_audit(system):
    system.delegate(0x9000)
    checker = InvariantChecker()
    assert checker.check(system, 1).ok
    assert system.drain_audit() == []
    assert checker.generation == system.memory.generation


def test_check_state_does_not_touch_the_system(attached):
    system, _ = attached
    before = system.canonical()
    check_state(system, InvariantReport())
    assert system.canonical() == before
