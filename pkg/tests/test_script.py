import io
import json

import pytest

from acaisim.config import Knobs, SystemConfig
from acaisim.errors import ParseError
from acaisim.script import (EXIT_EXPECTATION, EXIT_OK, EXIT_PARSE, EXIT_VIOLATION,
                            count_interface_calls, parse_line, parse_script, run_script,
                            trace_digest)

from conftest import SCRIPTS

HAPPY = SCRIPTS / "happy_path.acai"

# a realm with one page of its own, used by several scripts below
PRELUDE = """\
boot
delegate 0x8000
realm_create a
data_create a src=0x60000 dst=0x8000 ipa=0x2000
"""


def test_happy_path_script_is_clean():
    result = run_script(HAPPY)
    assert result.exit_code == EXIT_OK, result.message
    assert result.report.ok


def test_parse_positional_and_keys():
    cmd = parse_line("dma 01:00.0 read ipa=0x20000 len=16 t=0  # comment", 7)
    assert cmd.name == "dma"
    assert cmd.pos == {"dev": "01:00.0", "op": "read"}
    assert cmd.kv == {"ipa": "0x20000", "len": "16", "t": "0"}
    assert cmd.line == 7


def test_blank_and_comment_lines_skipped():
    assert parse_line("   # nothing here") is None
    assert parse_script("\n\n# x\nboot\n")[0].line == 4


def test_attach_flag():
    cmd = parse_line("data_create g src=0x1 dst=0x2 ipa=0x0 attach_dev dev=01:00.0 bars=0x4:4096")
    assert cmd.flags == {"attach_dev"}
    with pytest.raises(ParseError):
        parse_line("data_create g src=0x1 dst=0x2 ipa=0x0 attach_dev")


@pytest.mark.parametrize("line", [
    "frobnicate",
    "delegate",
    "delegate 0xZZ",
    "realm_create a colour=red",
    "dma 01:00.0 sideways ipa=0x0 len=4",
    "dma 01:00.0 read len=4",
    "prot_mem a dev=01:00.0 sg=0x1001:4096",
    "realm_write a ipa=0x0 data=xyz",
    "device d bus=99:99.9",
    "device d bus=01:00.0 bars=100",
    "device d bus=01:00.0 transform=rot13",
    "hv_smmu config a=1 b=2",
    "delegate 0x1000 pa=0x2000",
    "expect",
])
def test_parse_errors(line):
    with pytest.raises(ParseError):
        parse_line(line)
    assert run_script(line + "\n").exit_code == EXIT_PARSE


def test_parse_error_reports_the_line():
    result = run_script("boot\nboot\nnope\n")
    assert result.exit_code == EXIT_PARSE
    assert ":3:" in result.message
    assert result.events == []


def test_missing_policy_file_is_a_parse_error():
    result = run_script(PRELUDE + "activate a\nverify a policy=/no/such/file\n")
    assert result.exit_code == EXIT_PARSE


def test_expect_matches_refusal():
    assert run_script("boot\ndelegate 0x8000\ndelegate 0x8000\nexpect error=WrongWorld\n"
                      ).exit_code == EXIT_OK


def test_expect_wrong_error():
    result = run_script("boot\ndelegate 0x8000\ndelegate 0x8000\nexpect error=DoubleMap\n")
    assert result.exit_code == EXIT_EXPECTATION
    assert "expected DoubleMap, got WrongWorld" in result.message


def test_expect_after_success_fails():
    assert run_script("boot\ndelegate 0x8000\nexpect error=WrongWorld\n"
                      ).exit_code == EXIT_EXPECTATION


def test_unexpected_refusal_fails():
    result = run_script("boot\ndelegate 0x8000\ndelegate 0x8000\nboot\n")
    assert result.exit_code == EXIT_EXPECTATION
    assert "WrongWorld" in result.message


def test_refusal_on_last_line_fails():
    assert run_script("boot\ndelegate 0x8000\ndelegate 0x8000\n").exit_code == EXIT_EXPECTATION


def test_data_expectation():
    ok = PRELUDE + "realm_write a ipa=0x2000 data=beef\nrealm_read a ipa=0x2000 len=2 expect=beef\n"
    assert run_script(ok).exit_code == EXIT_OK
    bad = ok.replace("expect=beef", "expect=dead")
    assert run_script(bad).exit_code == EXIT_EXPECTATION


def test_observations_are_results():
    script = PRELUDE + "dram_probe 0x8000\nexpect error=Ciphertext\n"
    assert run_script(script).exit_code == EXIT_OK


def test_violation_exits_2():
    # with the RMM double-map check off, one granule ends up in two realms
    script = PRELUDE + ("realm_create b\n"
                        "data_create b src=0x60000 dst=0x8000 ipa=0x2000\n")
    config = SystemConfig(knobs=Knobs().without("rmm_double_map"))
    result = run_script(script, config=config)
    assert result.exit_code == EXIT_VIOLATION
    assert "I4" in result.message
    assert run_script(script + "expect error=DoubleMap\n").exit_code == EXIT_OK


def test_attack_command():
    assert run_script("attack hv_remap_realm_stream\n").exit_code == EXIT_OK
    assert run_script("attack nothing_like_this\n").exit_code == EXIT_EXPECTATION


def test_trace_is_json_lines():
    sink = io.StringIO()
    result = run_script(HAPPY, sink=sink)
    lines = sink.getvalue().splitlines()
    assert len(lines) == len(result.events)
    first = json.loads(lines[0])
    assert set(first) == {"step", "actor", "op", "args", "result", "digest"}
    assert first["op"] == "boot"


def test_trace_is_deterministic():
    a, b = run_script(HAPPY), run_script(HAPPY)
    assert trace_digest(a.events) == trace_digest(b.events)
    assert [e.digest for e in a.events] == [e.digest for e in b.events]


def test_interface_calls_are_in_the_trace():
    calls = count_interface_calls(run_script(HAPPY).events)
    assert calls["rmi_granule_delegate"] == 7
    assert calls["rsi_delegate_prot_mem"] == 1
    assert calls["smc_delegate_prot_mem"] == 3
    assert calls["smc_device_attach"] == 1


def test_opt_mode_premaps():
    calls = count_interface_calls(run_script(HAPPY, opt=True).events)
    assert calls["smc_delegate_prot_mem"] == 0
    assert calls["smc_premap_prot_mem"] > 0


@pytest.mark.parametrize("path", sorted(SCRIPTS.glob("*.acai")), ids=lambda p: p.name)
def test_shipped_scripts_run_clean(path):
    result = run_script(path)
    assert result.exit_code == EXIT_OK, result.message
