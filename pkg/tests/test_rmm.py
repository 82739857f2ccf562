import pytest

from acaisim.config import SystemConfig
from acaisim.errors import (AttachIncomplete, BarNotMapped, ConfigNotRealm, DoubleMap, IpaInUse,
                            NotActive, NotOwner, RealmActive, ResourceExhausted, StillMapped,
                            UnknownVm, Unmapped, WrongWorld)
from acaisim.pcie_fabric import emulated_device
from acaisim.rmm import DevParams, Policy, RealmState, ScatterGatherList, replay_measurement
from acaisim.smmu import PAGE_MASK
from acaisim.system import System
from acaisim.world_memory import GRANULE_SIZE, HYPERVISOR, Op, World

from conftest import BAR_IPA, BUF_IPA, BUS, build_attached, sg

# sha256 chain over one DATA entry (ipa 0x2000, 4096 zero bytes), computed by hand
ONE_ZERO_PAGE_AT_0x2000 = "8460a1e91e45726aa57f7f137a6836355a2a67776b0fd85f2c54ac7469d950bb"
# ... followed by a DATA entry at 0x3000 whose page starts with b"hello"
THEN_HELLO_AT_0x3000 = "eab8994b2d441c40158f705d05e9d099536cc346d34e2b1eee2eb9bfea8c6786"


def test_first_realm_is_vmid_zero(system):
    assert system.realm_create("a") == 0
    assert system.rmm.realms[0].state is RealmState.NEW


def test_vmids_and_keys_distinct(system):
    a, b = system.realm_create("a"), system.realm_create("b")
    assert a != b
    assert system.rmm.realms[a].mec_key_id != system.rmm.realms[b].mec_key_id


def test_duplicate_descriptor_exhausts(system):
    system.realm_create("a")
    with pytest.raises(ResourceExhausted):
        system.realm_create("a")


def test_delegate(system):
    system.delegate(0x8000)
    assert system.memory.world(0x8000) is World.REALM
    with pytest.raises(WrongWorld):
        system.delegate(0x8000)


def test_delegate_scrubs(system):
    system.hyp_access(0x8000, Op.WRITE, b"left over")
    system.delegate(0x8000)
    assert system.memory.peek(0x8000) == bytes(GRANULE_SIZE)


def test_undelegate_mapped_granule_is_still_mapped(attached):
    system, vmid = attached
    pa = system.rmm.realms[vmid].stage2[BUF_IPA]
    with pytest.raises(StillMapped):
        system.undelegate(pa)


def test_data_create_maps_and_measures(system):
    system.delegate(0x8000)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x5000, 0x8000, 0x2000)
    realm = system.rmm.realms[vmid]
    assert realm.stage2 == {0x2000: 0x8000}
    assert len(realm.data_log) == 1
    assert realm.measurement.hex() == ONE_ZERO_PAGE_AT_0x2000


def test_measurement_chain_matches_hand_computation(system):
    system.hyp_access(0x6000, Op.WRITE, b"hello")
    for pa in (0x8000, 0x9000):
        system.delegate(pa)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x5000, 0x8000, 0x2000)
    system.data_create(vmid, 0x6000, 0x9000, 0x3000)
    realm = system.rmm.realms[vmid]
    assert realm.measurement.hex() == THEN_HELLO_AT_0x3000
    assert replay_measurement(realm.data_log) == realm.measurement


def test_content_is_copied_under_realm_key(system):
    system.hyp_access(0x6000, Op.WRITE, b"image")
    system.delegate(0x8000)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x6000, 0x8000, 0x2000)
    assert system.realm_read(vmid, 0x2000, 5) == b"image"
    assert system.memory.tags[8] == system.rmm.realms[vmid].mec_key_id


def test_double_map_across_realms(system):
    system.delegate(0x8000)
    a, b = system.realm_create("a"), system.realm_create("b")
    system.data_create(b, 0x5000, 0x8000, 0x2000)
    with pytest.raises(DoubleMap):
        system.data_create(a, 0x5000, 0x8000, 0x2000)


def test_ipa_in_use(system):
    system.delegate(0x8000)
    system.delegate(0x9000)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x5000, 0x8000, 0x2000)
    with pytest.raises(IpaInUse):
        system.data_create(vmid, 0x5000, 0x9000, 0x2000)


def test_destination_must_be_delegated(system):
    vmid = system.realm_create("a")
    with pytest.raises(WrongWorld):
        system.data_create(vmid, 0x5000, 0x8000, 0x2000)


def test_bar_must_be_fully_mapped(system):
    system.add_device("acc", BUS, bars=(2,))
    for pa in (0x1000, 0x2000):
        system.delegate(pa)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x5000, 0x2000, BAR_IPA)     # only the first of two BAR pages
    with pytest.raises(BarNotMapped):
        system.data_create(vmid, 0x5000, 0x1000, 0, DevParams(BUS, ((BAR_IPA, 0x2000),)))


def test_config_space_must_be_realm(system):
    system.add_device("acc", BUS)
    vmid = system.realm_create("a")
    with pytest.raises(ConfigNotRealm):
        system.data_create(vmid, 0x5000, 0x1000, 0, DevParams(BUS))


def test_activate_freezes(attached):
    system, vmid = attached
    assert system.rmm.realms[vmid].state is RealmState.ACTIVE
    system.delegate(0x9000)
    with pytest.raises(RealmActive):
        system.data_create(vmid, 0x5000, 0x9000, 0x30000)


def test_activate_after_failed_attach(system):
    system.plug(emulated_device("fake", BUS))
    system.delegate(0x1000)
    vmid = system.realm_create("a")
    with pytest.raises(Exception):
        system.data_create(vmid, 0x5000, 0x1000, 0, DevParams(BUS))
    with pytest.raises(AttachIncomplete):
        system.activate(vmid)


def test_prot_mem_creates_one_entry_per_granule(attached):
    system, vmid = attached
    n = system.prot_mem(vmid, sg((BUF_IPA, 0x1000), (BUF_IPA + 0x1000, 0x1000)), BUS)
    assert n == 2
    realm = system.rmm.realms[vmid]
    table = system.smmu.table(BUS, realm=True)
    assert table[BUF_IPA] == realm.stage2[BUF_IPA]
    assert table[BUF_IPA + 0x1000] == realm.stage2[BUF_IPA + 0x1000]


def test_prot_mem_unmapped_commits_nothing(attached):
    system, vmid = attached
    with pytest.raises(Unmapped):
        system.prot_mem(vmid, sg((BUF_IPA, 0x1000), (0x90000, 0x1000)), BUS)
    assert BUF_IPA not in system.smmu.table(BUS, realm=True)


def test_prot_mem_other_device_not_owner(attached):
    system, vmid = attached
    with pytest.raises(NotOwner):
        system.prot_mem(vmid, sg((BUF_IPA, 0x1000)), 0x200)


def test_prot_mem_needs_active(system):
    vmid = build_attached(system, activate=False)
    with pytest.raises(NotActive):
        system.prot_mem(vmid, sg((BUF_IPA, 0x1000)), BUS)


def test_sg_alignment():
    with pytest.raises(ValueError):
        ScatterGatherList(((0x1001, 0x1000),))
    with pytest.raises(ValueError):
        ScatterGatherList(((0x1000, 100),))
    assert ScatterGatherList(((0x1000, 0x2000),)).pages() == [0x1000, 0x2000]


def test_destroy_releases_everything(attached):
    system, vmid = attached
    system.prot_mem(vmid, sg((BUF_IPA, 0x1000)), BUS)
    pas = list(system.rmm.realms[vmid].stage2.values())
    system.destroy(vmid)
    assert BUS not in system.monitor.registry
    assert system.smmu.realm_ste.get(BUS) is None
    assert not system.smmu.table(BUS, realm=True)
    for pa in pas:
        assert system.memory.world(pa) is World.NORMAL
        assert system.memory.peek(pa) == bytes(GRANULE_SIZE)
        assert pa & PAGE_MASK not in system.reverse.realm
    with pytest.raises(UnknownVm):
        system.destroy(vmid)


def test_dma_after_destroy_has_no_ste(attached):
    system, vmid = attached
    system.destroy(vmid)
    with pytest.raises(Exception) as info:
        system.dma(BUS, Op.READ, BUF_IPA, 16)
    assert info.value.name in ("NoSte", "DiscardedAtRootPort")


def test_report_has_device_section(attached):
    system, vmid = attached
    report = system.attest(vmid)
    assert report.device_section is not None
    assert report.bar_layout == ((BAR_IPA, 0x1000),)
    assert system.verify(report, Policy()).passed


def test_report_without_device(system):
    system.delegate(0x8000)
    vmid = system.realm_create("a")
    system.data_create(vmid, 0x5000, 0x8000, 0x2000)
    system.activate(vmid)
    report = system.attest(vmid)
    assert report.device_section is None
    assert system.verify(report, Policy(require_device=False)).passed
    assert system.verify(report, Policy()).reason == "NoDeviceSection"


def test_report_needs_active(system):
    vmid = system.realm_create("a")
    with pytest.raises(NotActive):
        system.attest(vmid)


def test_identical_scripts_identical_measurement():
    a, b = System(SystemConfig()), System(SystemConfig())
    ra, rb = build_attached(a), build_attached(b)
    assert a.attest(ra).realm_measurement == b.attest(rb).realm_measurement


def test_measurement_policy_mismatch(attached):
    system, vmid = attached
    report = system.attest(vmid)
    bad = Policy(realm_measurement=bytes(32))
    assert system.verify(report, bad).reason == "MeasurementMismatch"
    good = Policy(realm_measurement=replay_measurement(report.data_log))
    assert system.verify(report, good).passed


def test_policy_round_trip():
    policy = Policy(bytes(range(32)), bytes(32), (4096, 8192), True)
    assert Policy.parse(policy.dump()) == policy
    with pytest.raises(ValueError):
        Policy.parse("colour=blue")


def test_hypervisor_cannot_read_realm_after_data_create(attached):
    system, vmid = attached
    pa = system.rmm.realms[vmid].stage2[BUF_IPA]
    with pytest.raises(Exception) as info:
        system.memory.mem_access(HYPERVISOR, pa, Op.READ)
    assert info.value.name == "GpcDenied"
