from __future__ import annotations

import pytest

from storebounce.addrspace import AddressSpace
from storebounce.addrspace import KERNEL_DATA
from storebounce.addrspace import USER_DATA
from storebounce.config import load_profile
from storebounce.models import MicroarchProfile
from storebounce.uarch import Core

USER_PAGE = 0x0000400000000000
KERNEL_PAGE = 0xFFFF900000000000
UNMAPPED_PAGE = 0xFFFFA00000000000
NON_CANONICAL_PAGE = 0x0000900000000000


@pytest.fixture
def skylake() -> MicroarchProfile:
    return load_profile("skylake")


@pytest.fixture
def pentium4() -> MicroarchProfile:
    return load_profile("pentium4")


@pytest.fixture
def space() -> AddressSpace:
    space = AddressSpace()
    space.map_region(USER_PAGE, 4, USER_DATA)
    space.map_region(KERNEL_PAGE, 4, KERNEL_DATA)
    return space


@pytest.fixture
def core(space: AddressSpace, skylake: MicroarchProfile) -> Core:
    return Core(space, skylake, seed=0)
