"""DMA workloads used for call accounting.

A workload is k DMA buffers of p pages each, handed to one attached device.
The guest driver shares memory with the device one IPA-contiguous run at a
time, so the number of rsi_delegate_prot_mem calls depends only on how the
guest allocator lays the buffers out:

* ``ContiguousAllocator`` places each buffer in one run, one call per buffer;
* ``FragmentingAllocator`` leaves a hole after every page, one call per page.

Either way the monitor installs one stage-2 entry per page.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, TextIO

from .script import RunResult, count_interface_calls, run_script
from .world_memory import GRANULE_SIZE

BUFFER_IPA_BASE = 0x100000
DEVICE_BUS = "01:00.0"
CONFIG_PA = 0x1000
IMAGE_IPA = 0x10000
STAGING_PA = 0x80000


class ContiguousAllocator:
    """Bump allocator: every buffer occupies consecutive guest pages."""

    name = "contiguous"

    def __init__(self, base: int = BUFFER_IPA_BASE):
        self.next = base

    def allocate(self, pages: int) -> list[int]:
        out = [self.next + i * GRANULE_SIZE for i in range(pages)]
        self.next += pages * GRANULE_SIZE
        return out


class FragmentingAllocator:
    """Worst case: no two pages of a buffer are adjacent in guest-physical space."""

    name = "fragmented"

    def __init__(self, base: int = BUFFER_IPA_BASE):
        self.next = base

    def allocate(self, pages: int) -> list[int]:
        out = [self.next + 2 * i * GRANULE_SIZE for i in range(pages)]
        self.next += 2 * pages * GRANULE_SIZE
        return out


ALLOCATORS = {cls.name: cls for cls in (ContiguousAllocator, FragmentingAllocator)}


def runs(pages: list[int]) -> list[tuple[int, int]]:
    """Split sorted page addresses into (ipa, bytes) regions of adjacent pages."""
    out: list[list[int]] = []
    for ipa in pages:
        if out and out[-1][0] + out[-1][1] == ipa:
            out[-1][1] += GRANULE_SIZE
        else:
            out.append([ipa, GRANULE_SIZE])
    return [(ipa, size) for ipa, size in out]


@dataclass(frozen=True)
class Workload:
    buffers: int
    pages_per_buffer: int
    allocator: str = "contiguous"

    def layout(self) -> list[list[int]]:
        alloc = ALLOCATORS[self.allocator]()
        return [alloc.allocate(self.pages_per_buffer) for _ in range(self.buffers)]

    def script(self) -> str:
        """Scenario script: set up the realm and device, share every buffer, run DMA."""
        layout = self.layout()
        pages = [ipa for buf in layout for ipa in buf]
        lines = ["boot", f"device acc bus={DEVICE_BUS} bars={GRANULE_SIZE}",
                 "realm_create guest"]
        # granule 1 holds config space, then the image, the BAR window, then buffers
        pas = [CONFIG_PA + i * GRANULE_SIZE for i in range(len(pages) + 3)]
        lines += [f"delegate {pa:#x}" for pa in pas]
        lines.append(f"data_create guest src={STAGING_PA:#x} dst={pas[1]:#x} ipa={IMAGE_IPA:#x}")
        bar_ipa = IMAGE_IPA + GRANULE_SIZE
        lines.append(f"data_create guest src={STAGING_PA:#x} dst={pas[2]:#x} ipa={bar_ipa:#x}")
        for ipa, pa in zip(pages, pas[3:]):
            lines.append(f"data_create guest src={STAGING_PA:#x} dst={pa:#x} ipa={ipa:#x}")
        lines.append(f"data_create guest src={STAGING_PA:#x} dst={pas[0]:#x} ipa=0x0 "
                     f"attach_dev dev={DEVICE_BUS} bars={bar_ipa:#x}:{GRANULE_SIZE}")
        lines.append("activate guest")
        for buf in layout:
            for ipa, size in runs(buf):
                lines.append(f"prot_mem guest dev={DEVICE_BUS} sg={ipa:#x}:{size}")
        for buf in layout:
            for ipa in buf:
                lines.append(f"dma {DEVICE_BUS} read ipa={ipa:#x} len=16")
                lines.append(f"dma {DEVICE_BUS} write ipa={ipa:#x} len=16")
        return "\n".join(lines) + "\n"


@dataclass
class WorkloadResult:
    run: RunResult
    calls: Counter

    @property
    def rsi_calls(self) -> int:
        return self.calls["rsi_delegate_prot_mem"]

    @property
    def smc_delegations(self) -> int:
        return self.calls["smc_delegate_prot_mem"]


def run_workload(workload: Workload, *, opt: bool = False,
                 sink: Optional[TextIO] = None) -> WorkloadResult:
    result = run_script(workload.script(), opt=opt, sink=sink)
    return WorkloadResult(result, count_interface_calls(result.events))
