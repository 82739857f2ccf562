"""Threat model as a closed action alphabet, plus the named attack scenarios.

The alphabet drives the explorer and the fuzzer. Each action is one call into
the kernel (or one link-level manipulation) with concrete parameters drawn
from a small bounded universe: realms ``R0..``, devices ``D0..`` and granules
``g0..``. Realm ``Ri`` always maps granule ``gj`` at ``ipa_of(j)`` so the
universe stays finite.

Scenarios are short scripts in the scenario language: a setup that must run
cleanly, then attack steps, the first non-``ok`` outcome of which is compared
against the expected blocking error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .config import Knobs, SystemConfig
from .errors import UnknownScenario, UnknownVm, WrongWorld
from .monitor import SMMU_ALLOW_LIST, MapStage2, UnmapStage2, WriteConfig, WriteSte
from .pcie_fabric import emulated_device
from .rmm import DevParams, RealmState, ScatterGatherList
from .world_memory import GRANULE_SIZE, Op, World


class Actor(enum.Enum):
    HYPERVISOR = "hypervisor"
    COTENANT_REALM = "cotenant_realm"
    MALICIOUS_DEVICE = "malicious_device"
    PHYSICAL = "physical"
    # honest parties, needed so the explorer also interleaves normal operation
    REALM = "realm"
    DEVICE = "device"


IPA_BASE = 0x10000
SMMU_FIELDS = ("event_queue_threshold", "stage2_bypass", "ats_enable")


def ipa_of(granule: int) -> int:
    return IPA_BASE + granule * GRANULE_SIZE


def bus_of(device: int) -> int:
    return (device + 1) << 8          # D0 at 01:00.0, D1 at 02:00.0, ...


@dataclass(frozen=True)
class Bounds:
    realms: int = 2
    devices: int = 2
    granules: int = 8
    hv_ipas: int = 2                  # ipa slots the hypervisor may remap per stream
    base: str = "attached"            # "attached" or "boot"
    knobs: Knobs = field(default_factory=Knobs)
    opt: bool = False

    def system_config(self) -> SystemConfig:
        # explorable granules, one staging granule, then the SMMU table granules
        return SystemConfig(n_granules=self.granules + 1 + 4, knobs=self.knobs, opt=self.opt)

    @classmethod
    def parse(cls, text: str) -> "Bounds":
        values = {}
        disabled = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "disable":
                disabled.append(value)
            else:
                values[key] = value
        knobs = Knobs()
        for name in disabled:
            try:
                knobs = knobs.without(name)
            except KeyError:
                raise ValueError(f"no enforcement check called {name!r}") from None
        bounds = cls(
            realms=int(values.pop("realms", 2)),
            devices=int(values.pop("devices", 2)),
            granules=int(values.pop("granules", 8)),
            hv_ipas=int(values.pop("hv_ipas", 2)),
            base=values.pop("base", "attached"),
            opt=values.pop("opt", "0") in ("1", "true", "yes"),
            knobs=knobs,
        )
        if values:
            raise ValueError(f"unknown explore config keys: {sorted(values)}")
        if bounds.base not in ("attached", "boot"):
            raise ValueError(f"base must be attached or boot, not {bounds.base!r}")
        return bounds


@dataclass(frozen=True)
class AdversaryAction:
    actor: Actor
    op: str
    params: tuple = ()

    @property
    def label(self) -> str:
        return f"{self.op}({','.join(str(p) for p in self.params)})"

    def args(self) -> dict:
        return {"params": list(self.params)}

    def apply(self, system) -> None:
        _APPLY[self.op](system, *self.params)

    def refused(self, system) -> bool:
        """True only when the operation's first check is certain to reject it.

        Used by the explorer to skip copying a state for a no-op. It mirrors the
        leading checks of the target operation and never guesses: False means
        "unknown", not "will succeed".
        """
        guard = _GUARDS.get(self.op)
        return guard is not None and guard(system, *self.params)

    def unpacked(self) -> tuple:
        """(guard or None, apply function, params) for tight loops."""
        return _GUARDS.get(self.op), _APPLY[self.op], self.params


# ---------------------------------------------------------------- action semantics

def _vmid(system, r: int) -> int:
    vmid = system.rmm.names.get(f"R{r}")
    if vmid is None:
        raise UnknownVm(f"R{r} does not exist")
    return vmid


def _pa(g: int) -> int:
    return g * GRANULE_SIZE


def _map(system, r, g):
    system.data_create(_vmid(system, r), system.staging_pa(), _pa(g), ipa_of(g))


def _free_config_granule(system):
    used = set(system.reverse.realm) | set(system.reverse.stream)
    for g in range(system.staging_pa() // GRANULE_SIZE):
        if system.memory.gpt[g] is World.REALM and _pa(g) not in used:
            return g
    return None


def _attach(system, r, d):
    vmid = _vmid(system, r)
    g = _free_config_granule(system)
    if g is None:
        raise WrongWorld("no free realm granule for the config space")
    system.data_create(vmid, system.staging_pa(), _pa(g), ipa_of(g), DevParams(bus_of(d)))


def _prot(system, r, d, g):
    system.prot_mem(_vmid(system, r), ScatterGatherList.of((ipa_of(g), GRANULE_SIZE)), bus_of(d))


def _realm_write(system, r, g):
    system.realm_write(_vmid(system, r), ipa_of(g), b"secret")


def _hv_write(system, g):
    system.hyp_access(_pa(g), Op.WRITE, b"hv")


def _dma(system, d, op, g, t):
    system.dma(bus_of(d), Op(op), ipa_of(g), 16, t_bit=bool(t))


def _forge(system, d, victim, op, g):
    system.dma(bus_of(d), Op(op), ipa_of(g), 16, rid=bus_of(victim))


def _swap(system, d):
    old = system.device(bus_of(d))
    system.swap_device(bus_of(d), emulated_device(f"{old.name}'", bus_of(d), old.bars,
                                                  claims_serial=old.serial))


def _replay(system):
    if not system.fabric.tap:
        raise WrongWorld("nothing captured on the link yet")
    system.replay(-1)


_APPLY = {
    "delegate": lambda s, g: s.delegate(_pa(g)),
    "undelegate": lambda s, g: s.undelegate(_pa(g)),
    "map": _map,
    "attach": _attach,
    "activate": lambda s, r: s.activate(_vmid(s, r)),
    "destroy": lambda s, r: s.destroy(_vmid(s, r)),
    "create": lambda s, r: s.realm_create(f"R{r}"),
    "prot": _prot,
    "realm_write": _realm_write,
    "hv_remap": lambda s, d, g_ipa, g: s.smmu_request(MapStage2(bus_of(d), ipa_of(g_ipa), _pa(g))),
    "hv_unmap": lambda s, d, g_ipa: s.smmu_request(UnmapStage2(bus_of(d), ipa_of(g_ipa))),
    "hv_ste": lambda s, d, ats: s.smmu_request(WriteSte(bus_of(d), True, bool(ats))),
    "hv_config": lambda s, f: s.smmu_request(WriteConfig(f, 1)),
    "hv_write": _hv_write,
    "dma": _dma,
    "forge": _forge,
    "replay": _replay,
    "swap": _swap,
}


# ---------------------------------------------------------------- refusal guards

def _realm_or_none(system, r):
    vmid = system.rmm.names.get(f"R{r}")
    return None if vmid is None else system.rmm.realms.get(vmid)


def _not_new(system, r, *_):
    realm = _realm_or_none(system, r)
    return realm is None or realm.state is not RealmState.NEW


def _hv_stream_denied(system, d):
    return system.config.knobs.realm_stream_guard and system.monitor.is_realm_stream(bus_of(d))


def _guard_prot(system, r, d, g):
    realm = _realm_or_none(system, r)
    return (realm is None or realm.state is not RealmState.ACTIVE
            or realm.attached_device != bus_of(d) or ipa_of(g) not in realm.stage2)


def _guard_realm_write(system, r, g):
    realm = _realm_or_none(system, r)
    return realm is None or ipa_of(g) not in realm.stage2


def _guard_map(system, r, g):
    if _not_new(system, r) or system.memory.gpt[g] is not World.REALM:
        return True
    taken = system.config.knobs.rmm_double_map and _pa(g) in system.reverse.realm
    return taken or ipa_of(g) in _realm_or_none(system, r).stage2


def _guard_attach(system, r, d):
    return _not_new(system, r) or _free_config_granule(system) is None


def _guard_remap(system, d, i, g):
    if _hv_stream_denied(system, d):
        return True
    if not system.config.knobs.reverse_map:
        return False
    sid = bus_of(d)
    tid = (system.monitor.is_realm_stream(sid), sid)
    owner = system.reverse.stream.get(_pa(g))
    if owner is None:
        return False
    return owner != tid or system.smmu.table(sid, realm=tid[0]).get(ipa_of(i)) != _pa(g)


def _guard_activate(system, r):
    realm = _realm_or_none(system, r)
    return realm is None or realm.state is not RealmState.NEW or realm.attach_pending


def _guard_config(system, f):
    return f.startswith("ats") or f not in SMMU_ALLOW_LIST


_GUARDS = {
    "delegate": lambda s, g: s.memory.gpt[g] is not World.NORMAL or s.rmm.is_mapped(_pa(g)),
    "undelegate": lambda s, g: s.memory.gpt[g] is not World.REALM or s.rmm.is_mapped(_pa(g)),
    "hv_write": lambda s, g: s.memory.gpt[g] is not World.NORMAL,
    "map": _guard_map,
    "attach": _guard_attach,
    "activate": _guard_activate,
    "destroy": lambda s, r: _realm_or_none(s, r) is None,
    "create": lambda s, r: f"R{r}" in s.rmm.names,
    "prot": _guard_prot,
    "realm_write": _guard_realm_write,
    "hv_remap": _guard_remap,
    "hv_unmap": lambda s, d, i: _hv_stream_denied(s, d),
    "hv_ste": lambda s, d, ats: bool(ats) or _hv_stream_denied(s, d),
    "hv_config": _guard_config,
    "replay": lambda s: not s.fabric.tap,
}


def action_alphabet(bounds: Bounds = Bounds()) -> list[AdversaryAction]:
    """Every parameterised action within ``bounds``, in a fixed order."""
    R, D, G = range(bounds.realms), range(bounds.devices), range(bounds.granules)
    H, A = Actor.HYPERVISOR, []
    A += [AdversaryAction(H, "delegate", (g,)) for g in G]
    A += [AdversaryAction(H, "undelegate", (g,)) for g in G]
    A += [AdversaryAction(H, "map", (r, g)) for r in R for g in G]
    A += [AdversaryAction(H, "attach", (r, d)) for r in R for d in D]
    A += [AdversaryAction(H, "activate", (r,)) for r in R]
    A += [AdversaryAction(H, "destroy", (r,)) for r in R]
    A += [AdversaryAction(H, "create", (r,)) for r in R]
    A += [AdversaryAction(Actor.REALM if r == d else Actor.COTENANT_REALM, "prot", (r, d, g))
          for r in R for d in D for g in G]
    A += [AdversaryAction(Actor.REALM, "realm_write", (r, g)) for r in R for g in G[1:3]]
    A += [AdversaryAction(H, "hv_remap", (d, i, g))
          for d in D for i in range(min(bounds.hv_ipas, bounds.granules)) for g in G]
    A += [AdversaryAction(H, "hv_unmap", (d, i))
          for d in D for i in range(min(bounds.hv_ipas, bounds.granules))]
    A += [AdversaryAction(H, "hv_ste", (d, ats)) for d in D for ats in (0, 1)]
    if bounds.devices:
        A += [AdversaryAction(H, "hv_config", (f,)) for f in SMMU_FIELDS]
    # hypervisor scribbles: enough granules to cover realm, normal and reclaimed pages
    A += [AdversaryAction(H, "hv_write", (g,)) for g in G[:4]]
    # T=1 traffic aims at the realms' data pages, T=0 at a hypervisor remap slot
    realm_targets = G[1:3]
    A += [AdversaryAction(Actor.DEVICE, "dma", (d, op, g, 1))
          for d in D for op in ("read", "write") for g in realm_targets]
    A += [AdversaryAction(Actor.MALICIOUS_DEVICE, "dma", (d, op, 0, 0))
          for d in D for op in ("read", "write") if bounds.granules]
    A += [AdversaryAction(Actor.MALICIOUS_DEVICE, "forge", (d, v, "write", g))
          for d in D for v in D if v != d for g in realm_targets[:1]]
    if bounds.devices:
        A += [AdversaryAction(Actor.PHYSICAL, "replay", ())]
    A += [AdversaryAction(Actor.PHYSICAL, "swap", (d,)) for d in D[:1]]
    return A


def base_system(bounds: Bounds = Bounds()):
    """The state exploration starts from.

    ``boot``: only boot and device discovery. ``attached`` (default) additionally
    runs the honest prefix: R0 running with D0 attached and one protected
    page, R1 created with one data page and no device yet.
    """
    from .pcie_fabric import genuine_device
    from .system import System

    system = System(bounds.system_config())
    system.boot()
    for d in range(bounds.devices):
        system.plug(genuine_device(system.anchor, f"D{d}", bus_of(d)))
    for r in range(bounds.realms):
        system.realm_create(f"R{r}")
    if bounds.base == "attached" and bounds.realms >= 2 and bounds.devices >= 1 \
            and bounds.granules >= 3:
        for g in (0, 1, 2):
            system.delegate(_pa(g))
        _map(system, 0, 1)
        _attach(system, 0, 0)
        system.activate(_vmid(system, 0))
        _prot(system, 0, 0, 1)
        _map(system, 1, 2)
    elif bounds.base not in ("attached", "boot"):
        raise ValueError(f"unknown base {bounds.base!r}")
    system.drain_calls()
    return system


# ---------------------------------------------------------------- scenarios

class Threat(enum.Enum):
    UNTRUSTED_HYPERVISOR = "untrusted hypervisor"
    SMMU_CONFIGURATION = "SMMU configuration"
    MALICIOUS_COTENANTS = "malicious co-tenants"
    OTHER_MALICIOUS_DEVICES = "other malicious devices"
    PHYSICAL_ATTACKER = "physical attacker"


@dataclass(frozen=True)
class AttackScenario:
    name: str
    threat: Threat
    claim: str
    setup: str
    attack: str
    blocked_by: str
    at_step: int = 0

    def attack_lines(self) -> list[str]:
        return [ln for ln in self.attack.strip().splitlines() if ln.split("#", 1)[0].strip()]


@dataclass
class Outcome:
    name: str
    blocked: bool
    blocked_by: Optional[str]
    at_step: Optional[int]
    trace: list = field(default_factory=list)


VICTIM = """
boot
device acc bus=01:00.0 bars=4096
delegate 0x1000
delegate 0x2000
delegate 0x3000
delegate 0x4000
realm_create victim
data_create victim src=0x80000 dst=0x2000 ipa=0x10000
data_create victim src=0x80000 dst=0x3000 ipa=0x20000
data_create victim src=0x80000 dst=0x4000 ipa=0x21000
data_create victim src=0x80000 dst=0x1000 ipa=0x0 attach_dev dev=01:00.0 bars=0x10000:4096
activate victim
prot_mem victim dev=01:00.0 sg=0x20000:8192
realm_write victim ipa=0x20000 data=5345435245540a
"""

COTENANT = VICTIM + """
device acc2 bus=02:00.0
delegate 0x5000
delegate 0x6000
realm_create mal
data_create mal src=0x80000 dst=0x6000 ipa=0x30000
data_create mal src=0x80000 dst=0x5000 ipa=0x0 attach_dev dev=02:00.0
"""

COTENANT_ACTIVE = COTENANT + """
activate mal
prot_mem mal dev=02:00.0 sg=0x30000:4096
"""

FRESH_REALM = """
boot
delegate 0x1000
delegate 0x2000
delegate 0x3000
realm_create victim
data_create victim src=0x80000 dst=0x2000 ipa=0x10000
data_create victim src=0x80000 dst=0x3000 ipa=0x20000
"""

_SCENARIOS = [
    AttackScenario(
        "hv_remap_realm_stream", Threat.SMMU_CONFIGURATION,
        "hypervisor rewrites the realm device's stage-2 table to point at memory it controls",
        VICTIM, "hv_smmu map sid=01:00.0 ipa=0x20000 pa=0x9000", "RealmStreamDenied"),
    AttackScenario(
        "hv_smmu_config_tamper", Threat.SMMU_CONFIGURATION,
        "hypervisor asks the monitor to switch the SMMU into stage-2 bypass",
        VICTIM, "hv_smmu config stage2_bypass=1", "FieldDenied"),
    AttackScenario(
        "hv_enable_ats", Threat.SMMU_CONFIGURATION,
        "hypervisor turns on address translation services so a device could use cached PAs",
        VICTIM + "device nic bus=03:00.0\n", "hv_smmu ste sid=03:00.0 ats=1", "AtsDenied"),
    AttackScenario(
        "hv_direct_smmu_write", Threat.SMMU_CONFIGURATION,
        "hypervisor writes the stream table directly in memory",
        VICTIM, "hv_write 0xfc000 data=ff", "GpcDenied"),
    AttackScenario(
        "hv_emulate_device", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor presents an emulated device for attachment",
        FRESH_REALM + "device fake bus=01:00.0 bars=4096 kind=emulated\n",
        "data_create victim src=0x80000 dst=0x1000 ipa=0x0 attach_dev dev=01:00.0 "
        "bars=0x10000:4096",
        "AttestFailed"),
    AttackScenario(
        "hv_wrong_bar_sizes", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor declares a BAR larger than the device reports",
        FRESH_REALM + "device acc bus=01:00.0 bars=4096\ndelegate 0x4000\n"
        "data_create victim src=0x80000 dst=0x4000 ipa=0x11000\n",
        """
        data_create victim src=0x80000 dst=0x1000 ipa=0x0 attach_dev dev=01:00.0 bars=0x10000:8192
        activate victim
        attest victim
        verify victim
        """, "BarMismatch", 3),
    AttackScenario(
        "hv_bar_in_normal_world", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor backs a BAR with normal-world memory the realm never mapped",
        FRESH_REALM + "device acc bus=01:00.0 bars=4096\n",
        "data_create victim src=0x80000 dst=0x1000 ipa=0x0 attach_dev dev=01:00.0 "
        "bars=0x40000:4096",
        "BarNotMapped"),
    AttackScenario(
        "hv_rewrite_config_space", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor edits the locked configuration space to move BARs",
        VICTIM, "hv_write 0x1000 data=00", "GpcDenied"),
    AttackScenario(
        "hv_read_realm_memory", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor reads realm DMA memory from a core",
        VICTIM, "hv_read 0x3000", "GpcDenied"),
    AttackScenario(
        "hv_reclaim_during_dma", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor returns realm memory still mapped for device DMA to the normal world",
        VICTIM, "undelegate 0x3000", "StillMapped"),
    AttackScenario(
        "hv_double_assign_device", Threat.UNTRUSTED_HYPERVISOR,
        "hypervisor attaches a device that already belongs to one realm to a second realm",
        VICTIM + "delegate 0x5000\nrealm_create mal\n",
        "data_create mal src=0x80000 dst=0x5000 ipa=0x0 attach_dev dev=01:00.0",
        "StreamIdTaken"),
    AttackScenario(
        "hv_debug_device", Threat.PHYSICAL_ATTACKER,
        "a device with debug features enabled is attached",
        FRESH_REALM + "device acc bus=01:00.0 bars=4096 debug=1\n",
        """
        data_create victim src=0x80000 dst=0x1000 ipa=0x0 attach_dev dev=01:00.0 bars=0x10000:4096
        activate victim
        attest victim
        verify victim bar_sizes=4096
        """, "DebugEnabled", 3),
    AttackScenario(
        "cotenant_overlap_dma", Threat.MALICIOUS_COTENANTS,
        "hypervisor maps the victim's DMA page into a co-tenant realm with its own device",
        COTENANT, "data_create mal src=0x80000 dst=0x3000 ipa=0x20000", "DoubleMap"),
    AttackScenario(
        "cotenant_ipa_claim", Threat.MALICIOUS_COTENANTS,
        "co-tenant realm asks for device access to an ipa it does not map",
        COTENANT_ACTIVE, "prot_mem mal dev=02:00.0 sg=0x20000:4096", "Unmapped"),
    AttackScenario(
        "cotenant_foreign_stream", Threat.MALICIOUS_COTENANTS,
        "co-tenant realm asks to map its memory into the victim's device",
        COTENANT_ACTIVE, "prot_mem mal dev=01:00.0 sg=0x30000:4096", "NotOwner"),
    AttackScenario(
        "device_forge_rid", Threat.OTHER_MALICIOUS_DEVICES,
        "a malicious device sends DMA claiming the victim device's requester id",
        VICTIM + "device evil bus=05:00.0\n",
        "dma evil write ipa=0x20000 len=16 rid=01:00.0", "DiscardedAtRootPort"),
    AttackScenario(
        "device_cross_realm_dma", Threat.OTHER_MALICIOUS_DEVICES,
        "a co-tenant realm's device reads the victim's protected page",
        COTENANT_ACTIVE, "dma acc2 read ipa=0x20000 len=16", "TranslationFault"),
    AttackScenario(
        "normal_device_reads_realm", Threat.SMMU_CONFIGURATION,
        "hypervisor maps realm memory for a normal-world device, which then reads it",
        VICTIM + "device nic bus=03:00.0\nhv_smmu ste sid=03:00.0\n",
        """
        hv_smmu map sid=03:00.0 ipa=0x0 pa=0x2000
        dma nic read ipa=0x0 len=16 t=0
        """, "GpcDenied", 1),
    AttackScenario(
        "secure_world_reads_realm", Threat.UNTRUSTED_HYPERVISOR,
        "secure-world software reads realm memory",
        VICTIM, "secure_read 0x3000", "GpcDenied"),
    AttackScenario(
        "physical_replay_envelope", Threat.PHYSICAL_ATTACKER,
        "an interposer records a realm DMA packet and injects it again",
        VICTIM, """
        dma acc write ipa=0x20000 len=16
        phys_replay
        """, "DiscardedAtRootPort", 1),
    AttackScenario(
        "physical_link_tap", Threat.PHYSICAL_ATTACKER,
        "an on-path device reads realm DMA payloads off the link",
        VICTIM, """
        dma acc write ipa=0x20000 len=16
        phys_tap
        """, "Sealed", 1),
    AttackScenario(
        "physical_dram_probe", Threat.PHYSICAL_ATTACKER,
        "a cold-boot read of DRAM holding realm data",
        VICTIM, "dram_probe 0x3000", "Ciphertext"),
    AttackScenario(
        "physical_plug_after_attest", Threat.PHYSICAL_ATTACKER,
        "after attestation the device is replaced by another genuine-looking one",
        VICTIM + "attest victim\n", """
        phys_swap 01:00.0 name=evil
        dma evil write ipa=0x20000 len=16
        """, "DiscardedAtRootPort", 1),
]

SCENARIOS: dict[str, AttackScenario] = {s.name: s for s in _SCENARIOS}


def scenario(name: str) -> AttackScenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None


def run_attack_scenario(name: str, *, opt: bool = False) -> Outcome:
    from .script import ScriptRunner, parse_script

    sc = scenario(name)
    runner = ScriptRunner(SystemConfig(opt=opt), strict=True)
    runner.run(parse_script(sc.setup, source=f"{name}:setup"))
    if runner.exit_code:
        raise RuntimeError(f"setup of {name} failed: {runner.message}")
    first = None
    for i, cmd in enumerate(parse_script("\n".join(sc.attack_lines()), source=name)):
        result = runner.step(cmd)
        if runner.exit_code == 2:
            break
        if result != "ok" and first is None:
            first = (result, i)
            break
    blocked = (first is not None and first == (sc.blocked_by, sc.at_step)
               and runner.exit_code != 2)
    return Outcome(name, blocked, first[0] if first else None, first[1] if first else None,
                   runner.events)
