"""Deterministic simulator of confidential accelerator isolation for realm VMs."""

from .adversary import SCENARIOS, Bounds, action_alphabet, run_attack_scenario
from .config import Knobs, SystemConfig
from .errors import AcaiError
from .explore import explore, fuzz
from .invariants import check_invariants
from .script import count_interface_calls, run_script
from .system import System
from .workloads import Workload, run_workload

__all__ = [
    "AcaiError", "Bounds", "Knobs", "SCENARIOS", "System", "SystemConfig", "Workload",
    "action_alphabet", "check_invariants", "count_interface_calls", "explore", "fuzz",
    "run_attack_scenario", "run_script", "run_workload",
]
