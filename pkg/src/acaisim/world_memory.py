"""Physical memory as granules tagged with a world, plus the granule protection check.

The granule protection table (GPT) maps every granule to exactly one of four
worlds. Only a Root-world caller may change it; every change bumps a
generation counter and is published to registered flush listeners (the SMMU
TLB). Reads and writes from any accessor go through :meth:`PhysicalMemory.mem_access`,
which applies the world access matrix and the per-realm memory encryption
model (a realm write tags the granule with the writer's key; a read with a
different key returns :class:`Ciphertext` instead of the stored bytes).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import GpcDenied, NotRoot, OutOfRange

GRANULE_SIZE = 4096
GRANULE_SHIFT = 12


class World(enum.IntEnum):
    """2-bit world / physical address space tag."""

    NORMAL = 0
    SECURE = 1
    REALM = 2
    ROOT = 3


ACCESS_MATRIX: dict[World, frozenset[World]] = {
    World.ROOT: frozenset(World),
    World.REALM: frozenset({World.REALM, World.NORMAL}),
    World.SECURE: frozenset({World.SECURE, World.NORMAL}),
    World.NORMAL: frozenset({World.NORMAL}),
}


def access_allowed(accessor_world: World, granule_world: World) -> bool:
    return granule_world in ACCESS_MATRIX[accessor_world]


class AccessorKind(enum.Enum):
    CORE = "core"
    SMMU = "smmu"
    ROOT_PORT = "root_port"


class Op(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class AccessorCtx:
    kind: AccessorKind
    world: World
    vmid: Optional[int] = None
    mec_key_id: Optional[int] = None

    def __post_init__(self):
        if self.kind is AccessorKind.CORE and self.world is World.REALM and self.vmid is None:
            raise ValueError("a realm-world core accessor must carry a vmid")


MONITOR = AccessorCtx(AccessorKind.CORE, World.ROOT)
HYPERVISOR = AccessorCtx(AccessorKind.CORE, World.NORMAL)
SECURE_OS = AccessorCtx(AccessorKind.CORE, World.SECURE)


def realm_core(vmid: int, key_id: int) -> AccessorCtx:
    return AccessorCtx(AccessorKind.CORE, World.REALM, vmid=vmid, mec_key_id=key_id)


@dataclass(frozen=True)
class Ciphertext:
    """What a reader without the right memory-encryption key gets back."""

    key_id: int
    length: int


class MecKeyStore:
    """vmid -> memory encryption key id; ids are never reused."""

    def __init__(self):
        self.keys: dict[int, int] = {}
        self._next = 1

    def allocate(self, vmid: int) -> int:
        key = self._next
        self._next += 1
        self.keys[vmid] = key
        return key

    def release(self, vmid: int) -> None:
        self.keys.pop(vmid, None)

    def clone(self) -> "MecKeyStore":
        new = MecKeyStore.__new__(MecKeyStore)
        new.keys = dict(self.keys)
        new._next = self._next
        return new


FlushListener = Callable[[int, int], None]


class PhysicalMemory:
    """Granule store, GPT and GPC.

    ``audit`` receives one tuple per security-relevant event; the invariant
    checker consumes and clears it after every step.
    """

    def __init__(self, n_granules: int = 256, granule_size: int = GRANULE_SIZE):
        if granule_size != GRANULE_SIZE:
            raise ValueError("only 4096-byte granules are modelled")
        self.n_granules = n_granules
        self.granule_size = granule_size
        self.gpt: list[World] = [World.NORMAL] * n_granules
        self.generation = 1
        self.contents: dict[int, bytes] = {}
        self.tags: dict[int, int] = {}
        self.listeners: list[FlushListener] = []
        self.audit: list[tuple] = []

    @property
    def size(self) -> int:
        return self.n_granules * self.granule_size

    def index(self, pa: int) -> int:
        if pa < 0 or pa >= self.size:
            raise OutOfRange(f"pa {pa:#x} outside {self.size:#x}-byte space")
        return pa >> GRANULE_SHIFT

    def world(self, pa: int) -> World:
        return self.gpt[self.index(pa)]

    def gpt_set_world(self, pa: int, world: World, caller: AccessorCtx) -> None:
        if caller.world is not World.ROOT:
            raise NotRoot("only the monitor may update the GPT")
        idx = self.index(pa)
        old = self.gpt[idx]
        if old is world:
            return
        self.gpt[idx] = world
        self.generation += 1
        self.audit.append(("world", idx, old, world, idx not in self.contents, self.generation))
        for listener in self.listeners:
            listener(idx << GRANULE_SHIFT, self.generation)

    def gpc_check(self, accessor: AccessorCtx, pa: int) -> bool:
        return access_allowed(accessor.world, self.gpt[self.index(pa)])

    def mem_access(self, accessor: AccessorCtx, pa: int, op: Op,
                   data: Optional[bytes] = None, length: Optional[int] = None):
        idx = self.index(pa)
        gworld = self.gpt[idx]
        if not access_allowed(accessor.world, gworld):
            self.audit.append(("gpc_fault", accessor.kind, accessor.world, gworld, idx))
            raise GpcDenied(
                f"{accessor.kind.value} in {accessor.world.name} world denied on "
                f"{gworld.name} granule {pa:#x}")
        offset = pa & (self.granule_size - 1)
        self.audit.append(("access", accessor.kind, accessor.world, gworld, idx))
        if op is Op.READ:
            if length is None:
                length = self.granule_size - offset
            if offset + length > self.granule_size:
                raise OutOfRange("access crosses a granule boundary")
            tag = self.tags.get(idx)
            plain = tag is None or tag == accessor.mec_key_id
            self.audit.append(("read", idx, accessor.mec_key_id, tag, plain))
            if not plain:
                return Ciphertext(tag, length)
            stored = self.contents.get(idx)
            if stored is None:
                return bytes(length)
            return stored[offset:offset + length]

        if data is None:
            raise ValueError("write needs data")
        if offset + len(data) > self.granule_size:
            raise OutOfRange("access crosses a granule boundary")
        tag = self.tags.get(idx)
        new_tag = accessor.mec_key_id if gworld is World.REALM else None
        if tag is not None and tag != new_tag:
            # old bytes were under another key; they decrypt to nothing usable
            base = bytearray(self.granule_size)
        else:
            base = bytearray(self.contents.get(idx, bytes(self.granule_size)))
        base[offset:offset + len(data)] = data
        self._store(idx, bytes(base))
        if new_tag is None:
            self.tags.pop(idx, None)
        else:
            self.tags[idx] = new_tag
        return None

    def scrub(self, pa: int, caller: AccessorCtx) -> None:
        if caller.world is not World.ROOT:
            raise NotRoot("scrub is a root-world operation")
        idx = self.index(pa)
        self.contents.pop(idx, None)
        self.tags.pop(idx, None)

    def peek(self, pa: int) -> bytes:
        """Raw stored bytes, bypassing every check (inspection only)."""
        idx = self.index(pa)
        return self.contents.get(idx, bytes(self.granule_size))

    def _store(self, idx: int, blob: bytes) -> None:
        if blob.count(0) == len(blob):
            self.contents.pop(idx, None)
        else:
            self.contents[idx] = blob

    def clone(self) -> "PhysicalMemory":
        new = PhysicalMemory.__new__(PhysicalMemory)
        new.n_granules = self.n_granules
        new.granule_size = self.granule_size
        new.gpt = list(self.gpt)
        new.generation = self.generation
        new.contents = dict(self.contents)
        new.tags = dict(self.tags)
        new.listeners = []
        new.audit = []
        return new
