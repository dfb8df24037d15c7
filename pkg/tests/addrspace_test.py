from __future__ import annotations

import numpy as np
import pytest

from storebounce import addrspace
from storebounce.addrspace import AddressSpace
from storebounce.addrspace import Mapped
from storebounce.addrspace import NonCanonical
from storebounce.addrspace import NotMapped
from storebounce.addrspace import PAGE_SIZE
from storebounce.addrspace import USER_DATA
from storebounce.addrspace import VirtualAddress
from storebounce.exceptions import ModuleRegionOverflow
from storebounce.models import KernelLayout
from storebounce.models import OSProfile


@pytest.mark.parametrize(
    "vaddr,expected",
    [
        (0, True),
        (0x00007FFFFFFFFFFF, True),
        (0x0000800000000000, False),
        (0xFFFF7FFFFFFFFFFF, False),
        (0xFFFF800000000000, True),
        (0xFFFFFFFFFFFFFFFF, True),
    ],
)
def test_is_canonical(vaddr, expected):
    assert addrspace.is_canonical(vaddr) is expected


def test_virtual_address():
    vaddr = VirtualAddress(0xFFFFFFFF81000123)
    assert vaddr.vpn == 0xFFFFFFFF81000
    assert vaddr.page_offset == 0x123
    assert vaddr.canonical
    with pytest.raises(ValueError) as exc:
        VirtualAddress(2**64)
    assert "Not a 64-bit address" in str(exc)


def test_translate():
    space = AddressSpace()
    frames = space.map_region(0x1000, 2, USER_DATA)
    assert space.translate(0x1FFF) == Mapped(frames[0], USER_DATA)
    assert space.translate(0x2000).frame == frames[1]
    assert space.translate(0x3000) is NotMapped
    assert space.translate(0x0000900000000000) is NonCanonical
    assert space.mapped_vpns() == {1, 2}
    assert 0x1000 in space
    assert len(space) == 2


@pytest.mark.parametrize(
    "start,n_pages,message",
    [
        (0x1001, 1, "page aligned"),
        (0x1000, 0, "must be positive"),
        (0x00007FFFFFFFF000, 2, "not canonical"),
    ],
)
def test_map_region_rejects_bad_regions(start, n_pages, message):
    with pytest.raises(ValueError) as exc:
        AddressSpace().map_region(start, n_pages, USER_DATA)
    assert message in str(exc)


def test_map_region_rejects_overlaps():
    space = AddressSpace()
    space.map_region(0x1000, 4, USER_DATA)
    with pytest.raises(ValueError) as exc:
        space.map_region(0x3000, 4, USER_DATA)
    assert "overlaps" in str(exc)


def test_alias_shares_frames_and_memory():
    space = AddressSpace()
    frames = space.map_region(0x10000, 2, USER_DATA)
    alias = space.map_region(0x40000, 2, USER_DATA, alias_of=0x10000)
    assert alias == frames
    space.write_bytes(0x10ffe, b"abcd")
    assert space.read_bytes(0x40ffe, 4) == b"abcd"


def test_alias_of_unmapped_region():
    with pytest.raises(ValueError) as exc:
        AddressSpace().map_region(0x1000, 1, USER_DATA, alias_of=0x5000)
    assert "Alias source is not mapped" in str(exc)


def test_unmap_region():
    space = AddressSpace()
    space.map_region(0x1000, 3, USER_DATA)
    space.unmap_region(0x2000, 1)
    assert space.mapped_vpns() == {1, 3}


def test_unmapped_memory_reads_as_zeros():
    space = AddressSpace()
    space.map_region(0x1000, 1, USER_DATA)
    assert space.read_bytes(0x1000, 8) == bytes(8)
    with pytest.raises(ValueError):
        space.read_bytes(0x5000, 1)


def _check_layout(layout: KernelLayout, os_profile: OSProfile) -> None:
    start, slots = addrspace.KASLR_RANGES[os_profile]
    image = layout.kernel_size_pages * PAGE_SIZE
    assert (layout.kernel_base - start) % addrspace.KERNEL_ALIGN == 0
    assert start <= layout.kernel_base
    assert layout.kernel_base + image <= start + slots * addrspace.KERNEL_ALIGN
    if os_profile == OSProfile.LINUX:
        assert (layout.direct_map_base - addrspace.DIRECT_MAP_START) % addrspace.DIRECT_MAP_ALIGN == 0
    else:
        assert layout.direct_map_base is None
    extents = sorted(layout.module_extents, key=lambda extent: extent.start)
    assert len(extents) == len(addrspace.DEFAULT_MODULE_TABLE)
    for previous, current in zip(extents, extents[1:]):
        # at least one unmapped page between neighbours
        assert current.start >= previous.end + PAGE_SIZE
    region_end = layout.module_region + addrspace.MODULE_REGION_PAGES * PAGE_SIZE
    assert extents[0].start >= layout.module_region
    assert extents[-1].end <= region_end


@pytest.mark.parametrize("os_profile", [OSProfile.LINUX, OSProfile.WINDOWS])
def test_generate_layout_invariants(os_profile):
    for seed in range(1000):
        _check_layout(addrspace.generate_layout(seed, os_profile), os_profile)


def test_generate_layout_is_deterministic():
    assert addrspace.generate_layout(5) == addrspace.generate_layout(5)
    assert addrspace.generate_layout(5) != addrspace.generate_layout(6)


def test_generate_layout_covers_kaslr_range():
    bases = {addrspace.generate_layout(seed).kernel_base for seed in range(200)}
    assert len(bases) > 100


def test_generate_layout_direct_map_slots():
    layout = addrspace.generate_layout(1, direct_map_slots=1)
    assert layout.direct_map_base == addrspace.DIRECT_MAP_START
    with pytest.raises(ValueError):
        addrspace.generate_layout(1, direct_map_slots=0)


def test_generate_layout_module_region_overflow():
    with pytest.raises(ModuleRegionOverflow):
        addrspace.generate_layout(0, module_table=[("huge", 100)], module_region_pages=50)


def test_generate_layout_enclaves():
    layout = addrspace.generate_layout(0, enclave_table=[("enclave", 16)])
    (enclave,) = layout.enclave_extents
    assert enclave.size_pages == 16
    assert addrspace.ENCLAVE_REGION <= enclave.start
    assert enclave.end <= addrspace.ENCLAVE_REGION + addrspace.ENCLAVE_REGION_PAGES * PAGE_SIZE


def test_build_address_space_matches_layout():
    layout = addrspace.generate_layout(3, enclave_table=[("enclave", 4)])
    space = addrspace.build_address_space(layout)
    expected = layout.kernel_size_pages + layout.direct_map_pages
    expected += sum(extent.size_pages for extent in layout.module_extents)
    expected += 4
    assert len(space) == expected
    kernel = space.translate(layout.kernel_base)
    assert isinstance(kernel, Mapped)
    assert not kernel.flags.user_accessible
    assert space.translate(layout.enclave_extents[0].start).flags.protected_region


def test_layout_dump():
    layout = addrspace.generate_layout(0)
    dump = layout.dump()
    assert dump["kernel_base"] == layout.kernel_base
    assert {module["name"] for module in dump["modules"]} == {
        name for name, _ in addrspace.DEFAULT_MODULE_TABLE
    }


def test_place_respects_gaps():
    rng = np.random.default_rng(0)
    offsets = addrspace._place(rng, [3, 2, 5], region_pages=100, start_pages=10, max_gap=4)
    assert offsets[0] <= 10
    assert 1 <= offsets[1] - (offsets[0] + 3) <= 4
    assert 1 <= offsets[2] - (offsets[1] + 2) <= 4
