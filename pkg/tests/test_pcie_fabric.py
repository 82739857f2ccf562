import hashlib

import pytest

from acaisim.errors import AttestFailed, DeviceNotFound, DiscardedAtRootPort, NotRoot, RidInUse
from acaisim.pcie_fabric import (MAX_BARS, ConfigImage, DeviceModel, Envelope, PCIeTransaction,
                                 PcieFabric, Sealed, TrustAnchor, TxnKind, Verdict, bdf,
                                 emulated_device, format_bdf, genuine_device, parse_bdf)
from acaisim.world_memory import HYPERVISOR, MONITOR, Op

from conftest import BAR_IPA, BUF_IPA, BUS, sg


@pytest.fixture
def fabric():
    f = PcieFabric(TrustAnchor())
    f.plug(genuine_device(f.anchor, "acc", BUS, (1, 2)))
    return f


def test_bdf_round_trip():
    assert bdf(1, 0, 0) == 0x100
    assert parse_bdf("01:00.0") == 0x100
    assert parse_bdf("0x300") == 0x300
    assert format_bdf(bdf(0x3a, 0x1f, 7)) == "3a:1f.7"
    with pytest.raises(ValueError):
        bdf(256, 0, 0)


def test_config_image_round_trip():
    image = ConfigImage(0x100, ((0x40000, 4096), (0, 8192)), bytes(range(32)), True)
    assert ConfigImage.decode(image.encode()) == image
    assert ConfigImage.decode(b"junk" * 100) is None


def test_at_most_six_bars():
    with pytest.raises(ValueError):
        DeviceModel("x", 0x100, (1,) * (MAX_BARS + 1))


def test_program_key_needs_root(fabric):
    with pytest.raises(NotRoot):
        fabric.ide_program_key(BUS, HYPERVISOR)


def test_program_key_once_per_rid(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    with pytest.raises(RidInUse):
        fabric.ide_program_key(BUS, MONITOR)


def test_keyed_traffic_decrypts(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    verdict, _ = fabric.device_send(fabric.slots[BUS], TxnKind.DMA_READ, 0x1000, length=8)
    assert verdict is Verdict.DECRYPTED_OK


def test_unkeyed_realm_traffic_discarded(fabric):
    verdict, _ = fabric.device_send(fabric.slots[BUS], TxnKind.DMA_READ, 0x1000, length=8)
    assert verdict is Verdict.DISCARD


def test_plaintext_traffic(fabric):
    verdict, txn = fabric.device_send(fabric.slots[BUS], TxnKind.DMA_WRITE, 0x1000,
                                      payload=b"abc", t_bit=False)
    assert verdict is Verdict.PLAINTEXT_NORMAL
    assert fabric.tap[-1].visible == b"abc"


def test_tap_sees_only_sealed_realm_payloads(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    fabric.device_send(fabric.slots[BUS], TxnKind.DMA_WRITE, 0x1000, payload=b"secret")
    assert fabric.tap[-1].visible == Sealed(fabric.key_store[BUS], 6)


def test_replayed_packet_discarded(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    fabric.device_send(fabric.slots[BUS], TxnKind.DMA_READ, 0x1000, length=8)
    assert fabric.deliver(fabric.tap[-1].txn) is Verdict.DISCARD


def test_tampered_envelope_discarded(fabric):
    key = fabric.ide_program_key(BUS, MONITOR)
    bad = PCIeTransaction(BUS, True, TxnKind.DMA_READ, 0, b"", 8, Envelope(key, 5, False))
    assert fabric.deliver(bad) is Verdict.DISCARD


def test_erased_key_discards_old_stream(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    fabric.ide_erase_key(BUS, MONITOR)
    verdict, _ = fabric.device_send(fabric.slots[BUS], TxnKind.DMA_READ, 0x1000, length=8)
    assert verdict is Verdict.DISCARD


def test_realm_traffic_needs_envelope():
    with pytest.raises(ValueError):
        PCIeTransaction(BUS, True, TxnKind.DMA_READ, 0)


def test_genuine_attestation_verifies(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    report = fabric.spdm_attest(fabric.slots[BUS])
    assert fabric.anchor.verify(report)
    assert report.bar_sizes == (4096, 8192)
    assert report.firmware_digest == hashlib.sha256(b"firmware v1").digest()
    assert report.debug_disabled


def test_attestation_needs_the_ide_stream(fabric):
    with pytest.raises(AttestFailed):
        fabric.spdm_attest(fabric.slots[BUS])


def test_emulated_device_cannot_attest(fabric):
    fake = emulated_device("fake", 0x200, claims_serial=fabric.slots[BUS].serial)
    fabric.plug(fake)
    fabric.ide_program_key(0x200, MONITOR)
    report = fabric.spdm_attest(fake)
    assert report.serial == fabric.slots[BUS].serial
    assert not fabric.anchor.verify(report)


def test_keyless_device_cannot_attest(fabric):
    dev = DeviceModel("blank", 0x200, (1,))
    fabric.plug(dev)
    fabric.ide_program_key(0x200, MONITOR)
    with pytest.raises(AttestFailed):
        fabric.spdm_attest(dev)


def test_forged_signature_rejected(fabric):
    fabric.ide_program_key(BUS, MONITOR)
    report = fabric.spdm_attest(fabric.slots[BUS])
    other = TrustAnchor(b"another manufacturer")
    assert not other.verify(report)


def test_reset_clears_device_state(fabric):
    dev = fabric.slots[BUS]
    dev.local_mem = b"x" * len(dev.local_mem)
    dev.bar_mem[0] = b"regs"
    fabric.device_reset(dev)
    assert dev.local_mem == bytes(len(dev.local_mem))
    assert dev.bar_mem == {}
    assert dev.link_key_id is None


def test_probe_missing(fabric):
    with pytest.raises(DeviceNotFound):
        fabric.probe(0x900)


def test_mmio_round_trip(attached):
    system, vmid = attached
    system.mmio(vmid, BAR_IPA + 8, Op.WRITE, b"\x01\x02")
    assert system.mmio(vmid, BAR_IPA + 8, Op.READ, length=2) == b"\x01\x02"
    assert isinstance(system.fabric.tap[-1].visible, Sealed)


def test_mmio_outside_bar(attached):
    system, vmid = attached
    with pytest.raises(Exception) as info:
        system.mmio(vmid, BUF_IPA, Op.READ)
    assert info.value.name == "NotBarRegion"


def test_swapped_device_cannot_open_stream(attached):
    system, vmid = attached
    system.prot_mem(vmid, sg((BUF_IPA, 0x1000)), BUS)
    old = system.device(BUS)
    system.swap_device(BUS, genuine_device(system.anchor, "impostor", BUS, old.bars))
    with pytest.raises(DiscardedAtRootPort):
        system.dma(BUS, Op.READ, BUF_IPA, 16)
    with pytest.raises(DiscardedAtRootPort):
        system.mmio(vmid, BAR_IPA, Op.READ)
    assert system.attest(vmid).device_live is False
