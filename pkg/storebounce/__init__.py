from __future__ import annotations

import importlib.metadata

from storebounce.addrspace import AddressSpace
from storebounce.addrspace import build_address_space
from storebounce.addrspace import generate_layout
from storebounce.attacks import break_kaslr
from storebounce.attacks import classify_modules
from storebounce.attacks import detect_protected_pages
from storebounce.attacks import enumerate_modules
from storebounce.attacks import find_direct_map
from storebounce.attacks import monitor_activity
from storebounce.attacks import spectre_leak
from storebounce.attacks import tsx_atomicity_probe
from storebounce.config import load_profile
from storebounce.config import make_config
from storebounce.harness import emit_trace
from storebounce.harness import oracle_mapped_set
from storebounce.harness import run_scenario
from storebounce.models import OSProfile
from storebounce.models import Scenario
from storebounce.primitives import data_bounce
from storebounce.primitives import fetch_bounce
from storebounce.primitives import speculative_fetch_bounce
from storebounce.uarch import Core

__version__ = importlib.metadata.version(__name__)


__all__: list[str] = [
    "AddressSpace",
    "Core",
    "OSProfile",
    "Scenario",
    "break_kaslr",
    "build_address_space",
    "classify_modules",
    "data_bounce",
    "detect_protected_pages",
    "emit_trace",
    "enumerate_modules",
    "fetch_bounce",
    "find_direct_map",
    "generate_layout",
    "load_profile",
    "make_config",
    "monitor_activity",
    "oracle_mapped_set",
    "run_scenario",
    "spectre_leak",
    "speculative_fetch_bounce",
    "tsx_atomicity_probe",
    "__version__",
]
