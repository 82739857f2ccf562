from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .world_memory import GRANULE_SIZE


@dataclass(frozen=True)
class Knobs:
    """Enforcement checks. Every one is on in a correct system.

    Turning one off is a mutation used to show the invariant checker is not
    vacuous; each maps to the invariant it protects.
    """

    ide_verdict: bool = True          # I1: root port drops packets whose key does not match the rid
    attestation: bool = True          # I1: monitor rejects devices without a verifying report
    registry_exclusive: bool = True   # I2: one device per realm, one realm per device
    realm_stream_guard: bool = True   # I3: hypervisor may not touch realm stream tables
    rmm_double_map: bool = True       # I4: a PA is mapped by at most one realm stage-2
    reverse_map: bool = True          # I5: a PA is mapped by at most one SMMU stage-2

    def without(self, name: str) -> "Knobs":
        if name not in {f.name for f in fields(self)}:
            raise KeyError(name)
        return replace(self, **{name: False})


# the five checks used for mutation sensitivity, one per invariant
MUTATION_KNOBS = {
    "I1": "ide_verdict",
    "I2": "registry_exclusive",
    "I3": "realm_stream_guard",
    "I4": "rmm_double_map",
    "I5": "reverse_map",
}


@dataclass(frozen=True)
class SystemConfig:
    n_granules: int = 256
    granule_size: int = GRANULE_SIZE
    smmu_granules: int = 4
    max_realms: int = 16
    opt: bool = False
    knobs: Knobs = field(default_factory=Knobs)

    def __post_init__(self):
        if self.n_granules <= self.smmu_granules:
            raise ValueError("physical space too small for the SMMU tables")
