"""Scenario scripts: parsing, execution with per-step invariant checks, and traces.

One command per line, space-separated tokens, ``#`` starts a comment.
Positional arguments come first, then ``key=value`` pairs and bare flags.
Addresses are written in hex with a ``0x`` prefix, other numbers in decimal;
bus addresses may also be written ``bb:dd.f``.

Exit codes: 0 clean, 2 invariant violation, 3 failed expectation, 4 parse error.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, TextIO

from .config import SystemConfig
from .errors import AcaiError, ParseError
from .invariants import InvariantChecker, InvariantReport
from .monitor import MapStage2, UnmapStage2, WriteConfig, WriteSte
from .pcie_fabric import TRANSFORMS, Sealed, emulated_device, genuine_device, parse_bdf
from .rmm import DevParams, Policy, ScatterGatherList
from .system import System
from .world_memory import GRANULE_SIZE, Ciphertext, Op

EXIT_OK, EXIT_VIOLATION, EXIT_EXPECTATION, EXIT_PARSE = 0, 2, 3, 4

# outcomes that report what an observer saw rather than a refusal
OBSERVATIONS = frozenset({"ok", "Sealed", "Ciphertext", "Plaintext"})


@dataclass(frozen=True)
class Spec:
    positional: tuple[str, ...] = ()
    required: frozenset = frozenset()
    optional: frozenset = frozenset()
    flags: frozenset = frozenset()
    any_keys: bool = False


def _spec(positional=(), required=(), optional=(), flags=(), any_keys=False) -> Spec:
    return Spec(tuple(positional), frozenset(required), frozenset(optional), frozenset(flags),
                any_keys)


COMMANDS: dict[str, Spec] = {
    # grammar core
    "delegate": _spec(["pa"]),
    "realm_create": _spec(["name"]),
    "data_create": _spec(["realm"], ["src", "dst", "ipa"], ["dev", "bars"], ["attach_dev"]),
    "activate": _spec(["realm"]),
    "prot_mem": _spec(["realm"], ["dev", "sg"]),
    "dma": _spec(["dev", "op"], ["ipa", "len"], ["t", "rid", "expect"]),
    "mmio": _spec(["realm", "op"], ["ipa"], ["data", "len", "expect"]),
    "attest": _spec(["realm"]),
    "verify": _spec(["realm"], (), ["policy", "realm_measurement", "firmware_digest", "firmware",
                                    "bar_sizes", "require_device"]),
    "destroy": _spec(["realm"]),
    "attack": _spec(["scenario"]),
    "expect": _spec((), ["error"]),
    "check": _spec(),
    # platform and adversary extensions
    "boot": _spec(),
    "device": _spec(["name"], ["bus"], ["bars", "fw", "debug", "kind", "transform"]),
    "undelegate": _spec(["pa"]),
    "realm_write": _spec(["realm"], ["ipa", "data"]),
    "realm_read": _spec(["realm"], ["ipa"], ["len", "expect"]),
    "hv_write": _spec(["pa"], ["data"]),
    "hv_read": _spec(["pa"], (), ["len"]),
    "secure_read": _spec(["pa"], (), ["len"]),
    "hv_smmu": _spec(["request"], any_keys=True),
    "phys_swap": _spec(["bus"], (), ["name", "kind"]),
    "phys_replay": _spec((), (), ["index"]),
    "phys_tap": _spec((), (), ["index"]),
    "dram_probe": _spec(["pa"]),
}

_INT_KEYS = {"src", "dst", "ipa", "len", "t", "index", "pa"}
_CHOICES = {("dma", "op"): ("read", "write"), ("mmio", "op"): ("read", "write"),
            ("hv_smmu", "request"): ("map", "unmap", "ste", "config")}


@dataclass(frozen=True)
class Command:
    name: str
    pos: dict
    kv: dict
    flags: frozenset
    line: int = 0
    text: str = ""

    def args(self) -> dict:
        out = dict(self.pos)
        out.update(self.kv)
        for flag in sorted(self.flags):
            out[flag] = True
        return out


def _int(text: str, where: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(f"{where}: {text!r} is not a number") from None


def _bus(text: str, where: str) -> int:
    try:
        return parse_bdf(text)
    except ValueError:
        raise ParseError(f"{where}: {text!r} is not a bus address") from None


def _hex(text: str, where: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ParseError(f"{where}: {text!r} is not hex data") from None


def _regions(text: str, where: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in filter(None, text.split(",")):
        ipa, sep, size = part.partition(":")
        if not sep:
            raise ParseError(f"{where}: region {part!r} must be <ipa>:<bytes>")
        out.append((_int(ipa, where), _int(size, where)))
    return tuple(out)


def parse_line(text: str, line: int = 0, source: str = "<script>") -> Optional[Command]:
    body = text.split("#", 1)[0].strip()
    if not body:
        return None
    where = f"{source}:{line}"
    name, *tokens = body.split()
    spec = COMMANDS.get(name)
    if spec is None:
        raise ParseError(f"{where}: unknown command {name!r}")
    pos, kv, flags = {}, {}, set()
    names = list(spec.positional)
    for tok in tokens:
        if "=" in tok:
            key, value = tok.split("=", 1)
            if not key or (key not in spec.required | spec.optional and not spec.any_keys):
                raise ParseError(f"{where}: {name} does not take {key}=")
            if key in kv:
                raise ParseError(f"{where}: {key}= given twice")
            kv[key] = value
        elif tok in spec.flags:
            flags.add(tok)
        elif names and not kv:
            pos[names.pop(0)] = tok
        else:
            raise ParseError(f"{where}: unexpected token {tok!r}")
    if names:
        raise ParseError(f"{where}: {name} needs <{names[0]}>")
    missing = spec.required - kv.keys()
    if missing:
        raise ParseError(f"{where}: {name} needs {', '.join(sorted(missing))}=")
    for (cmd, key), choices in _CHOICES.items():
        if cmd == name and pos.get(key) not in choices:
            raise ParseError(f"{where}: {key} must be one of {'|'.join(choices)}")
    # validate value syntax now so execution never meets a malformed literal
    for key, value in {**pos, **kv}.items():
        if key in _INT_KEYS:
            _int(value, where)
        elif key in ("rid", "bus", "sid") or (key == "dev" and name != "dma"):
            _bus(value, where)
        elif key in ("data", "expect"):
            _hex(value, where)
        elif key == "sg":
            regions = _regions(value, where)
            try:
                ScatterGatherList(regions)
            except ValueError as exc:
                raise ParseError(f"{where}: {exc}") from None
        elif key == "bars" and name == "data_create":
            _regions(value, where)
        elif key == "bars" and name == "device":
            for size in filter(None, value.split(",")):
                if _int(size, where) % GRANULE_SIZE:
                    raise ParseError(f"{where}: BAR size {size} is not granule aligned")
    if name == "data_create" and ("attach_dev" in flags) != ("dev" in kv):
        raise ParseError(f"{where}: attach_dev and dev= go together")
    if name == "device" and kv.get("transform", "identity") not in TRANSFORMS:
        raise ParseError(f"{where}: unknown transform {kv['transform']!r}")
    if name == "hv_smmu" and pos["request"] == "config" and len(kv) != 1:
        raise ParseError(f"{where}: hv_smmu config takes exactly one <field>=<value>")
    return Command(name, pos, kv, frozenset(flags), line, body)


def parse_script(text: str, source: str = "<script>") -> list[Command]:
    commands = []
    for i, raw in enumerate(text.splitlines(), 1):
        cmd = parse_line(raw, i, source)
        if cmd is not None:
            commands.append(cmd)
    return commands


@dataclass(frozen=True)
class TraceEvent:
    step: int
    actor: str
    op: str
    args: dict
    result: str
    digest: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def count_interface_calls(trace: Iterable[TraceEvent]) -> Counter:
    """Counts of rmi_*, rsi_* and smc_* events in a trace."""
    return Counter(ev.op for ev in trace if ev.op.startswith(("rmi_", "rsi_", "smc_")))


def trace_digest(trace: Iterable[TraceEvent]) -> str:
    h = hashlib.sha256()
    for ev in trace:
        h.update(ev.to_json().encode() + b"\n")
    return h.hexdigest()


class ScriptRunner:
    """Executes commands against one system, checking invariants after each step."""

    def __init__(self, config: SystemConfig = SystemConfig(), *, base_dir: Path = Path("."),
                 sink: Optional[TextIO] = None, strict: bool = True):
        self.config = config
        self.system = System(config)
        self.checker = InvariantChecker()
        self.base_dir = Path(base_dir)
        self.sink = sink
        self.strict = strict
        self.events: list[TraceEvent] = []
        self.reports: dict[str, object] = {}
        self.attestations: dict[str, object] = {}    # last report per realm, kept after destroy
        self.last_report: Optional[InvariantReport] = None
        self.step_index = 0
        self.exit_code = EXIT_OK
        self.message = ""
        self.results: list[str] = []
        self.reads: list[tuple[int, bytes]] = []    # (line, bytes) seen by realm-side reads

    # ------------------------------------------------------------ driver
    def run(self, commands: list[Command]) -> int:
        pending: Optional[tuple[Command, str]] = None
        for cmd in commands:
            if cmd.name == "expect":
                want = cmd.kv["error"]
                got = self.results[-1] if self.results else None
                if got != want:
                    return self._fail(EXIT_EXPECTATION,
                                      f"line {cmd.line}: expected {want}, got {got}")
                pending = None
                continue
            if pending is not None:
                return self._unexpected(*pending)
            result = self.step(cmd)
            if self.exit_code:
                return self.exit_code
            if result not in OBSERVATIONS:
                pending = (cmd, result)
        if pending is not None:
            return self._unexpected(*pending)
        return self.exit_code

    def _unexpected(self, cmd: Command, result: str) -> int:
        return self._fail(EXIT_EXPECTATION, f"line {cmd.line}: {cmd.text!r} failed with {result}")

    def _fail(self, code: int, message: str) -> int:
        self.exit_code = code
        self.message = message
        return code

    def step(self, cmd: Command) -> str:
        index = self.step_index
        self.step_index += 1
        try:
            result = self._exec(cmd)
        except ParseError:
            raise
        except AcaiError as exc:
            result = exc.name
        except (ValueError, KeyError) as exc:
            raise ParseError(f"line {cmd.line}: {exc}") from None
        calls = self.system.drain_calls()
        report = self.checker.check(self.system, index)
        self.last_report = report
        digest = self.system.digest()
        self._emit(TraceEvent(index, self._actor(cmd), cmd.name, cmd.args(), result, digest))
        for call in calls:
            self._emit(TraceEvent(index, call.actor, call.op, call.args, call.result, digest))
        self.results.append(result)
        if not report.ok:
            self._fail(EXIT_VIOLATION, "; ".join(str(v) for v in report.violations))
        return result

    def _emit(self, event: TraceEvent) -> None:
        self.events.append(event)
        if self.sink is not None:
            self.sink.write(event.to_json() + "\n")

    @staticmethod
    def _actor(cmd: Command) -> str:
        name = cmd.name
        if name in ("prot_mem", "mmio", "attest", "realm_write", "realm_read"):
            return f"realm:{cmd.pos['realm']}"
        if name == "dma":
            return f"device:{cmd.pos['dev']}"
        if name.startswith(("phys_", "dram_")):
            return "physical"
        actors = {"boot": "monitor", "device": "platform", "verify": "verifier",
                  "attack": "harness", "check": "harness", "secure_read": "secure"}
        return actors.get(name, "hypervisor")

    # ------------------------------------------------------------ commands
    def _realm(self, name: str) -> int:
        from .errors import UnknownVm
        vmid = self.system.rmm.names.get(name)
        if vmid is None:
            raise UnknownVm(f"no realm named {name!r}")
        return vmid

    def _device(self, ref: str):
        try:
            return self.system.fabric.by_name(ref)
        except AcaiError:
            return self.system.device(parse_bdf(ref))

    @staticmethod
    def _matches(data, expect: Optional[str]) -> str:
        if expect is None:
            return "ok"
        want = bytes.fromhex(expect)
        if isinstance(data, (bytes, bytearray)) and bytes(data[:len(want)]) == want:
            return "ok"
        return "ExpectMismatch"

    def _exec(self, cmd: Command) -> str:
        s, kv, pos = self.system, cmd.kv, cmd.pos
        name = cmd.name

        def num(key):
            return int(kv[key], 0)

        if name == "boot":
            s.boot()
        elif name == "device":
            bars = tuple(int(x, 0) // GRANULE_SIZE for x in kv.get("bars", "").split(",") if x)
            bus = parse_bdf(kv["bus"])
            fw = kv.get("fw", "firmware v1").encode()
            if kv.get("kind", "genuine") == "emulated":
                dev = emulated_device(pos["name"], bus, bars, firmware=fw)
            else:
                dev = genuine_device(s.anchor, pos["name"], bus, bars, firmware=fw,
                                     debug_disabled=kv.get("debug", "0") == "0",
                                     transform=kv.get("transform", "identity"))
            s.plug(dev)
        elif name == "delegate":
            s.delegate(int(pos["pa"], 0))
        elif name == "undelegate":
            s.undelegate(int(pos["pa"], 0))
        elif name == "realm_create":
            s.realm_create(pos["name"])
        elif name == "data_create":
            params = None
            if "attach_dev" in cmd.flags:
                params = DevParams(parse_bdf(kv["dev"]), _regions(kv.get("bars", ""), name))
            s.data_create(self._realm(pos["realm"]), num("src"), num("dst"), num("ipa"), params)
        elif name == "activate":
            s.activate(self._realm(pos["realm"]))
        elif name == "destroy":
            s.destroy(self._realm(pos["realm"]))
            self.reports.pop(pos["realm"], None)
        elif name == "prot_mem":
            sg = ScatterGatherList(_regions(kv["sg"], name))
            s.prot_mem(self._realm(pos["realm"]), sg, parse_bdf(kv["dev"]))
        elif name == "dma":
            op = Op(pos["op"])
            rid = parse_bdf(kv["rid"]) if "rid" in kv else None
            res = s.dma(self._device(pos["dev"]), op, num("ipa"), num("len"),
                        t_bit=kv.get("t", "1") != "0", rid=rid)
            if op is Op.WRITE:
                return "ok"
            self.reads.append((cmd.line, bytes(res.data)))
            return self._matches(res.data, kv.get("expect"))
        elif name == "mmio":
            op = Op(pos["op"])
            vmid = self._realm(pos["realm"])
            if op is Op.WRITE:
                s.mmio(vmid, num("ipa"), op, data=bytes.fromhex(kv.get("data", "00")))
                return "ok"
            data = s.mmio(vmid, num("ipa"), op, length=int(kv.get("len", "8"), 0))
            self.reads.append((cmd.line, bytes(data)))
            return self._matches(data, kv.get("expect"))
        elif name == "realm_write":
            s.realm_write(self._realm(pos["realm"]), num("ipa"), bytes.fromhex(kv["data"]))
        elif name == "realm_read":
            data = s.realm_read(self._realm(pos["realm"]), num("ipa"), int(kv.get("len", "16"), 0))
            self.reads.append((cmd.line, bytes(data)))
            return self._matches(data, kv.get("expect"))
        elif name == "attest":
            report = s.attest(self._realm(pos["realm"]))
            self.reports[pos["realm"]] = self.attestations[pos["realm"]] = report
        elif name == "verify":
            report = self.reports.get(pos["realm"])
            if report is None:
                report = s.attest(self._realm(pos["realm"]))
            result = s.verify(report, self._policy(kv))
            return "ok" if result.passed else result.reason
        elif name == "attack":
            from .adversary import run_attack_scenario
            outcome = run_attack_scenario(pos["scenario"], opt=self.config.opt)
            return "ok" if outcome.blocked else "NotBlocked"
        elif name == "check":
            pass    # invariants run after every step anyway
        elif name == "hv_write":
            s.hyp_access(int(pos["pa"], 0), Op.WRITE, bytes.fromhex(kv["data"]))
        elif name == "hv_read":
            s.hyp_access(int(pos["pa"], 0), Op.READ, length=int(kv.get("len", "16"), 0))
        elif name == "secure_read":
            s.secure_access(int(pos["pa"], 0), Op.READ, length=int(kv.get("len", "16"), 0))
        elif name == "hv_smmu":
            s.smmu_request(self._smmu_request(pos["request"], kv))
        elif name == "phys_swap":
            bus = parse_bdf(pos["bus"])
            old = s.device(bus)
            new_name = kv.get("name", f"{old.name}-swapped")
            if kv.get("kind", "genuine") == "emulated":
                new = emulated_device(new_name, bus, old.bars, claims_serial=old.serial)
            else:
                new = genuine_device(s.anchor, new_name, bus, old.bars)
            s.swap_device(bus, new)
        elif name == "phys_replay":
            s.replay(int(kv.get("index", "-1"), 0))
        elif name == "phys_tap":
            record = s.fabric.tap[int(kv.get("index", "-1"), 0)]
            return "Sealed" if isinstance(record.visible, Sealed) else "Plaintext"
        elif name == "dram_probe":
            data = s.dram_probe(int(pos["pa"], 0))
            return "Ciphertext" if isinstance(data, Ciphertext) else "Plaintext"
        else:   # pragma: no cover - parse_line rejects unknown commands
            raise ParseError(f"unknown command {name!r}")
        return "ok"

    def _policy(self, kv: dict) -> Policy:
        text = ""
        if "policy" in kv:
            path = Path(kv["policy"])
            if not path.is_absolute():
                path = self.base_dir / path
            try:
                text = path.read_text()
            except OSError as exc:
                raise ParseError(f"cannot read policy {path}: {exc}") from None
        inline = {k: v for k, v in kv.items() if k != "policy"}
        if "firmware" in inline:
            inline["firmware_digest"] = hashlib.sha256(inline.pop("firmware").encode()).hexdigest()
        text += "".join(f"\n{k}={v}" for k, v in inline.items())
        return Policy.parse(text)

    @staticmethod
    def _smmu_request(kind: str, kv: dict):
        if kind == "config":
            (field_name, value), = kv.items()
            return WriteConfig(field_name, int(value, 0))
        sid = parse_bdf(kv["sid"])
        if kind == "map":
            return MapStage2(sid, int(kv["ipa"], 0), int(kv["pa"], 0))
        if kind == "unmap":
            return UnmapStage2(sid, int(kv["ipa"], 0))
        return WriteSte(sid, kv.get("valid", "1") != "0", kv.get("ats", "0") != "0")


@dataclass
class RunResult:
    exit_code: int
    events: list[TraceEvent] = field(default_factory=list)
    message: str = ""
    report: Optional[InvariantReport] = None
    system: Optional[System] = None
    reads: list[tuple[int, bytes]] = field(default_factory=list)
    attestations: dict = field(default_factory=dict)


def run_script(script: str | Path, *, opt: bool = False, sink: Optional[TextIO] = None,
               config: Optional[SystemConfig] = None) -> RunResult:
    """Run a script given as a path or as text."""
    if isinstance(script, Path) or (isinstance(script, str) and "\n" not in script
                                    and Path(script).is_file()):
        path = Path(script)
        text, base, source = path.read_text(), path.parent, str(path)
    else:
        text, base, source = script, Path("."), "<script>"
    config = config or SystemConfig(opt=opt)
    try:
        commands = parse_script(text, source)
    except ParseError as exc:
        return RunResult(EXIT_PARSE, message=str(exc))
    runner = ScriptRunner(config, base_dir=base, sink=sink)
    try:
        code = runner.run(commands)
    except ParseError as exc:
        code, message = EXIT_PARSE, str(exc)
    else:
        message = runner.message
    return RunResult(code, runner.events, message, runner.last_report, runner.system,
                     runner.reads, dict(runner.attestations))
