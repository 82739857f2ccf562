from pathlib import Path

import pytest

from acaisim.config import SystemConfig
from acaisim.rmm import DevParams, ScatterGatherList
from acaisim.system import System

ROOT = Path(__file__).resolve().parent.parent
SCRIPTS = ROOT / "scripts"

BUS = 0x100            # 01:00.0
CONFIG_PA = 0x1000
IMAGE_IPA = 0x10000
BUF_IPA = 0x20000
BAR_IPA = 0x40000


def build_attached(system: System, *, activate: bool = True, bus: int = BUS,
                   name: str = "guest", base_pa: int = CONFIG_PA) -> int:
    """Realm with an image page, two buffers, a one-page BAR and an attached device."""
    if not system.monitor.booted:
        system.boot()
    if bus not in system.fabric.slots:
        system.add_device(f"acc{bus:x}", bus, bars=(1,))
    src = system.staging_pa()
    pas = [base_pa + i * 0x1000 for i in range(5)]
    for pa in pas:
        system.delegate(pa)
    vmid = system.realm_create(name)
    system.data_create(vmid, src, pas[1], IMAGE_IPA)
    system.data_create(vmid, src, pas[2], BUF_IPA)
    system.data_create(vmid, src, pas[3], BUF_IPA + 0x1000)
    system.data_create(vmid, src, pas[4], BAR_IPA)
    system.data_create(vmid, src, pas[0], 0, DevParams(bus, ((BAR_IPA, 0x1000),)))
    if activate:
        system.activate(vmid)
    return vmid


@pytest.fixture
def system():
    s = System(SystemConfig())
    s.boot()
    return s


@pytest.fixture
def attached(system):
    vmid = build_attached(system)
    return system, vmid


def sg(*entries):
    return ScatterGatherList(tuple(entries))


# ---------------------------------------------------------------- acceptance report
# every test marked criterion(n, title) feeds one pass/fail line per criterion,
# printed at the end of the run

_CRITERIA: dict[int, dict] = {}
_NODE_CRITERION: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "seconds": 0.0})
            _NODE_CRITERION[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _NODE_CRITERION.get(report.nodeid)
    if number is None:
        return
    entry = _CRITERIA[number]
    entry["seconds"] += report.duration
    if report.when == "call" or report.failed or report.skipped:
        entry["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            verdict = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif "failed" in outcomes:
            verdict = "FAIL"
        else:
            verdict = "SKIPPED"
        terminalreporter.write_line(f"criterion {number}: {verdict:7} {entry['title']} "
                                    f"({len(outcomes)} checks, {entry['seconds']:.1f}s)")
