import pytest
from hypothesis import given, strategies as st

from acaisim.errors import GpcDenied, NotRoot, OutOfRange
from acaisim.world_memory import (
    GRANULE_SIZE, HYPERVISOR, MONITOR, SECURE_OS, AccessorCtx, AccessorKind, Ciphertext,
    MecKeyStore, Op, PhysicalMemory, World, access_allowed, realm_core,
)


@pytest.fixture
def mem():
    return PhysicalMemory(256)


def test_default_space_is_one_mib(mem):
    assert mem.size == 1 << 20
    assert all(w is World.NORMAL for w in mem.gpt)


def test_monitor_sets_world_and_bumps_generation(mem):
    assert mem.generation == 1
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    assert mem.world(0x8000) is World.REALM
    assert mem.generation == 2


def test_setting_same_world_is_not_a_change(mem):
    mem.gpt_set_world(0x8000, World.NORMAL, MONITOR)
    assert mem.generation == 1


def test_hypervisor_cannot_set_world(mem):
    with pytest.raises(NotRoot):
        mem.gpt_set_world(0x8000, World.REALM, HYPERVISOR)
    assert mem.world(0x8000) is World.NORMAL


def test_out_of_range(mem):
    with pytest.raises(OutOfRange):
        mem.gpt_set_world(0xFFFF_F000, World.ROOT, MONITOR)


def test_flush_listeners_see_every_change(mem):
    seen = []
    mem.listeners.append(lambda pa, gen: seen.append((pa, gen)))
    mem.gpt_set_world(0x3000, World.REALM, MONITOR)
    mem.gpt_set_world(0x3000, World.NORMAL, MONITOR)
    assert seen == [(0x3000, 2), (0x3000, 3)]


@pytest.mark.parametrize("accessor,granule,allowed", [
    (World.NORMAL, World.REALM, False),
    (World.REALM, World.NORMAL, True),
    (World.ROOT, World.REALM, True),
    (World.ROOT, World.SECURE, True),
    (World.SECURE, World.REALM, False),
    (World.REALM, World.SECURE, False),
    (World.NORMAL, World.ROOT, False),
])
def test_access_matrix(accessor, granule, allowed):
    assert access_allowed(accessor, granule) is allowed


@given(st.sampled_from(list(World)), st.sampled_from(list(World)))
def test_access_matrix_shape(accessor, granule):
    # an oracle written out independently of the implementation's table
    expected = (accessor is World.ROOT or granule is World.NORMAL or accessor is granule)
    assert access_allowed(accessor, granule) is expected


def test_realm_round_trip(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    vm0 = realm_core(0, 7)
    mem.mem_access(vm0, 0x8000, Op.WRITE, b"\xab" * 32)
    assert mem.mem_access(vm0, 0x8000, Op.READ, length=32) == b"\xab" * 32
    assert mem.tags[8] == 7


def test_monitor_reads_ciphertext_of_realm_data(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    mem.mem_access(realm_core(0, 7), 0x8000, Op.WRITE, b"secret")
    out = mem.mem_access(MONITOR, 0x8000, Op.READ, length=6)
    assert out == Ciphertext(7, 6)


def test_other_realm_key_reads_ciphertext(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    mem.mem_access(realm_core(0, 7), 0x8000, Op.WRITE, b"secret")
    assert isinstance(mem.mem_access(realm_core(1, 8), 0x8000, Op.READ, length=6), Ciphertext)


def test_hypervisor_read_of_realm_granule_denied(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    with pytest.raises(GpcDenied):
        mem.mem_access(HYPERVISOR, 0x8000, Op.READ)
    assert mem.audit[-1][0] == "gpc_fault"


def test_secure_world_denied_on_realm(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    with pytest.raises(GpcDenied):
        mem.mem_access(SECURE_OS, 0x8000, Op.READ)


def test_scrub(mem):
    mem.gpt_set_world(0x8000, World.REALM, MONITOR)
    mem.mem_access(realm_core(0, 7), 0x8000, Op.WRITE, b"secret")
    mem.scrub(0x8000, MONITOR)
    assert mem.peek(0x8000) == bytes(GRANULE_SIZE)
    assert 8 not in mem.tags
    assert mem.mem_access(realm_core(1, 8), 0x8000, Op.READ, length=4) == bytes(4)


def test_scrub_needs_root(mem):
    with pytest.raises(NotRoot):
        mem.scrub(0x8000, HYPERVISOR)


def test_realm_core_needs_vmid():
    with pytest.raises(ValueError):
        AccessorCtx(AccessorKind.CORE, World.REALM)


def test_access_cannot_cross_granule(mem):
    with pytest.raises(OutOfRange):
        mem.mem_access(HYPERVISOR, 0x0FFF, Op.WRITE, b"ab")


def test_key_ids_never_reused():
    keys = MecKeyStore()
    a = keys.allocate(0)
    keys.release(0)
    b = keys.allocate(0)
    assert a != b


@given(st.binary(min_size=1, max_size=64), st.integers(1, 5), st.integers(6, 9))
def test_mismatched_key_never_returns_plaintext(data, writer_key, reader_key):
    mem = PhysicalMemory(16)
    mem.gpt_set_world(0x1000, World.REALM, MONITOR)
    mem.mem_access(realm_core(0, writer_key), 0x1000, Op.WRITE, data)
    out = mem.mem_access(realm_core(1, reader_key), 0x1000, Op.READ, length=len(data))
    assert out != data and isinstance(out, Ciphertext)


@given(st.lists(st.tuples(st.integers(0, 15), st.sampled_from(list(World))), max_size=30))
def test_generation_strictly_increases(changes):
    mem = PhysicalMemory(16)
    last = mem.generation
    for idx, world in changes:
        before = mem.world(idx * GRANULE_SIZE)
        mem.gpt_set_world(idx * GRANULE_SIZE, world, MONITOR)
        if before is not world:
            assert mem.generation == last + 1
        last = mem.generation


def test_clone_is_independent(mem):
    copy = mem.clone()
    copy.gpt_set_world(0x8000, World.REALM, MONITOR)
    assert mem.world(0x8000) is World.NORMAL
