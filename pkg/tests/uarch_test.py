from __future__ import annotations

import numpy as np
import pytest

from storebounce.addrspace import AddressSpace
from storebounce.addrspace import PAGE_SHIFT
from storebounce.addrspace import PAGE_SIZE
from storebounce.addrspace import SYNTHETIC_FRAME
from storebounce.addrspace import USER_DATA
from storebounce.exceptions import ArchitecturalFault
from storebounce.exceptions import StallError
from storebounce.exceptions import WindowStateError
from storebounce.transient import Suppression
from storebounce.transient import transient_window
from storebounce.transient import TransientWindow
from storebounce.uarch import AccessKind
from storebounce.uarch import CacheState
from storebounce.uarch import Core
from storebounce.uarch import LoadSource
from storebounce.uarch import Tlb

from .conftest import KERNEL_PAGE
from .conftest import NON_CANONICAL_PAGE
from .conftest import UNMAPPED_PAGE
from .conftest import USER_PAGE


def test_tlb_lru_within_a_set():
    tlb = Tlb(sets=2, ways=2)
    assert tlb.insert(0, 100) is None
    assert tlb.insert(2, 102) is None
    assert tlb.lookup(0) == 100  # 0 becomes the most recently used
    assert tlb.insert(4, 104) == 2
    assert 0 in tlb and 4 in tlb and 2 not in tlb
    assert tlb.insert(1, 101) is None  # other set
    assert len(tlb) == 3
    ranks = {vpn: rank for vpn, _, rank in tlb.entries()}
    assert ranks == {0: 1, 4: 0, 1: 0}


def test_tlb_lookup_without_touch():
    tlb = Tlb(sets=1, ways=2)
    tlb.insert(0, 10)
    tlb.insert(1, 11)
    tlb.lookup(0, touch=False)
    assert tlb.insert(2, 12) == 0


def test_tlb_rejects_empty_geometry():
    with pytest.raises(ValueError):
        Tlb(sets=0, ways=4)


def test_cache_state_lru():
    cache = CacheState(capacity=2)
    assert not cache.access((1, 0))
    assert not cache.access((2, 0))
    assert cache.access((1, 0))
    assert not cache.access((3, 0))
    assert (2, 0) not in cache
    cache.flush((1, 0))
    assert len(cache) == 1


def test_store_outside_window_commits_and_forwards(core):
    core.store_issue(USER_PAGE + 8, b"\x11\x22\x33\x44")
    assert core.space.read_bytes(USER_PAGE + 8, 4) == b"\x11\x22\x33\x44"
    result = core.load_issue(USER_PAGE + 9, 2)
    assert result.source == LoadSource.STORE_FORWARD
    assert result.value == b"\x22\x33"
    core.drain()
    assert core.store_buffer == []
    result = core.load_issue(USER_PAGE + 9, 2)
    assert result.source == LoadSource.CACHE_OR_MEMORY
    assert result.value == b"\x22\x33"


def test_youngest_store_wins(core):
    core.store_issue(USER_PAGE, b"\x01")
    core.store_issue(USER_PAGE, b"\x02")
    assert core.load_issue(USER_PAGE, 1).value == b"\x02"


def test_partial_overlap_blocks_forwarding(core):
    core.store_issue(USER_PAGE, b"\x01\x02")
    result = core.load_issue(USER_PAGE + 1, 2)
    assert result.source == LoadSource.CACHE_OR_MEMORY


@pytest.mark.parametrize(
    "size,offset,message",
    [
        (3, 0, "Store size"),
        (2, PAGE_SIZE - 1, "page boundary"),
    ],
)
def test_store_issue_rejects_bad_stores(core, size, offset, message):
    with pytest.raises(ValueError) as exc:
        core.store_issue(USER_PAGE + offset, bytes(size))
    assert message in str(exc)


def test_load_issue_rejects_bad_sizes(core):
    with pytest.raises(ValueError):
        core.load_issue(USER_PAGE, 0)
    with pytest.raises(ValueError):
        core.load_issue(USER_PAGE, 33)


@pytest.mark.parametrize(
    "vaddr,reason",
    [
        (KERNEL_PAGE, "supervisor page"),
        (UNMAPPED_PAGE, "page not present"),
        (NON_CANONICAL_PAGE, "non-canonical address"),
    ],
)
def test_faults_outside_windows_are_architectural(core, vaddr, reason):
    with pytest.raises(ArchitecturalFault) as exc:
        core.load_issue(vaddr, 1)
    assert exc.value.reason == reason
    assert exc.value.vaddr == vaddr


def test_kernel_mode_allows_supervisor_access(core):
    with core.kernel_mode():
        core.store_issue(KERNEL_PAGE, b"\x05")
        assert core.load_issue(KERNEL_PAGE, 1).value == b"\x05"
    assert not core.supervisor


def test_store_buffer_stalls_when_full(core):
    for _ in range(core.profile.store_buffer_capacity):
        core.store_issue(USER_PAGE, b"\x00")
    with pytest.raises(StallError):
        core.store_issue(USER_PAGE, b"\x00")


def test_transient_stores_are_squashed_and_never_reach_memory(core):
    core.load_issue(USER_PAGE, 1)
    with transient_window(core) as window:
        core.store_issue(USER_PAGE, b"\x7f")
        assert core.load_issue(USER_PAGE, 1).value == b"\x7f"
    assert core.store_buffer == []
    assert len(window.squash_log) == 1
    assert core.space.read_bytes(USER_PAGE, 1) == b"\x00"


def test_first_store_to_an_uncached_translation_does_not_forward(core):
    with transient_window(core):
        core.store_issue(KERNEL_PAGE, b"\x42")
        result = core.load_issue(KERNEL_PAGE, 1)
    assert result.faulted
    assert result.value == b"\x00"
    # the page walk completes when the window closes
    assert core.tlb_lookup(AccessKind.DATA, KERNEL_PAGE >> PAGE_SHIFT)
    with transient_window(core):
        core.store_issue(KERNEL_PAGE, b"\x42")
        result = core.load_issue(KERNEL_PAGE, 1)
    assert result.source == LoadSource.STORE_FORWARD
    assert result.value == b"\x42"


def test_store_to_unmapped_page_never_resolves(core):
    for _ in range(3):
        with transient_window(core):
            core.store_issue(UNMAPPED_PAGE, b"\x42")
            result = core.load_issue(UNMAPPED_PAGE, 1)
        assert result.source != LoadSource.STORE_FORWARD


def test_store_to_non_canonical_address_resolves_to_synthetic_frame(core):
    with transient_window(core):
        core.store_issue(NON_CANONICAL_PAGE, b"\x42")
        assert core.store_buffer[-1].resolved_frame == SYNTHETIC_FRAME
        result = core.load_issue(NON_CANONICAL_PAGE, 1)
    assert result.source == LoadSource.STORE_FORWARD


def test_itlb_store_resolution(core):
    vpn = KERNEL_PAGE >> PAGE_SHIFT
    with transient_window(core):
        core.store_issue(KERNEL_PAGE, b"\x01", kind=AccessKind.FETCH)
    assert core.tlb_lookup(AccessKind.FETCH, vpn)
    assert not core.tlb_lookup(AccessKind.DATA, vpn)


def test_write_transient_forwarding_depends_on_profile(space, skylake, pentium4):
    for profile, expected in [(skylake, LoadSource.WT_FORWARD), (pentium4, LoadSource.CACHE_OR_MEMORY)]:
        core = Core(space, profile, seed=0)
        core.store_issue(USER_PAGE + 16, b"\xaa\xbb")
        with transient_window(core):
            result = core.load_issue(UNMAPPED_PAGE + 17, 1)
        assert result.source == expected
        if expected == LoadSource.WT_FORWARD:
            assert result.value == b"\xbb"


def test_fetch_issue_fills_itlb_and_cache(core):
    with core.kernel_mode():
        core.fetch_issue(KERNEL_PAGE)
    assert core.tlb_lookup(AccessKind.FETCH, KERNEL_PAGE >> PAGE_SHIFT)
    assert not core.tlb_lookup(AccessKind.DATA, KERNEL_PAGE >> PAGE_SHIFT)
    with core.kernel_mode():
        latency = core.timed_access(KERNEL_PAGE)
    assert latency == core.profile.lat_cache_hit + core.profile.lat_walk


def test_timed_access_and_flush_line(core):
    profile = core.profile
    assert core.timed_access(USER_PAGE) == profile.lat_cache_miss + profile.lat_walk
    assert core.timed_access(USER_PAGE) == profile.lat_cache_hit
    core.flush_line(USER_PAGE)
    assert core.timed_access(USER_PAGE) == profile.lat_cache_miss
    assert core.tlb_lookup(AccessKind.DATA, USER_PAGE >> PAGE_SHIFT)


def test_timing_noise_flips_outcomes(space, skylake):
    core = Core(space, skylake.model_copy(update={"noise_p": 0.5}), seed=1)
    core.timed_access(USER_PAGE)
    hits = sum(core.is_hit(core.timed_access(USER_PAGE)) for _ in range(1000))
    assert 400 < hits < 600


def test_tlb_evict_vpn(core):
    vpn = USER_PAGE >> PAGE_SHIFT
    core.load_issue(USER_PAGE, 1)
    assert core.tlb_lookup(AccessKind.DATA, vpn)
    core.tlb_evict_vpn(AccessKind.DATA, vpn)
    assert not core.tlb_lookup(AccessKind.DATA, vpn)
    core.tlb_insert(AccessKind.FETCH, vpn, 1)
    core.tlb_flush_all(AccessKind.FETCH)
    assert not core.tlb_lookup(AccessKind.FETCH, vpn)


def test_siblings_share_tlbs_but_not_store_buffers(core):
    sibling = core.sibling(seed=1)
    assert sibling.tlb is core.tlb
    assert sibling.space is core.space
    core.store_issue(USER_PAGE, b"\x09")
    assert sibling.store_buffer == []
    assert core.tlb_lookup(AccessKind.DATA, USER_PAGE >> PAGE_SHIFT)
    assert sibling.tlb_lookup(AccessKind.DATA, USER_PAGE >> PAGE_SHIFT)


def test_windows_do_not_nest(core):
    with transient_window(core):
        with pytest.raises(WindowStateError):
            core.open_window(TransientWindow(Suppression.TSX_LIKE))
    with pytest.raises(WindowStateError):
        core.close_window()


@pytest.mark.parametrize(
    "suppression,overhead",
    [
        (Suppression.TSX_LIKE, "tsx_overhead"),
        (Suppression.SIGNAL_LIKE, "signal_overhead"),
    ],
)
def test_window_overhead(core, suppression, overhead):
    start = core.cycles
    with transient_window(core, suppression):
        pass
    assert core.cycles - start == getattr(core.profile, overhead)


def test_alias_stores_do_not_forward_across_virtual_pages(skylake):
    space = AddressSpace()
    space.map_region(0x10000, 1, USER_DATA)
    space.map_region(0x20000, 1, USER_DATA, alias_of=0x10000)
    core = Core(space, skylake, seed=0)
    core.store_issue(0x10000, b"\x33")
    result = core.load_issue(0x20000, 1)
    assert result.source == LoadSource.CACHE_OR_MEMORY
    assert result.value == b"\x33"


def test_cycle_counter_never_decreases(core):
    rng = np.random.default_rng(5)
    operations = [
        lambda offset: (core.store_issue(USER_PAGE + offset, b"\x01"), core.drain()),
        lambda offset: core.load_issue(USER_PAGE + offset, 1),
        lambda offset: core.timed_access(USER_PAGE + offset),
        lambda offset: core.flush_line(USER_PAGE + offset),
        lambda offset: core.tlb_evict_vpn(AccessKind.DATA, USER_PAGE >> PAGE_SHIFT),
        lambda offset: core.drain(),
    ]
    previous = core.cycles
    for _ in range(2000):
        offset = int(rng.integers(0, 4 * PAGE_SIZE))
        operation = operations[int(rng.integers(0, len(operations)))]
        if rng.random() < 0.3:
            with transient_window(core, Suppression.TSX_LIKE):
                core.store_issue(KERNEL_PAGE + offset, b"\x02")
                core.load_issue(KERNEL_PAGE + offset, 1)
                core.load_issue(UNMAPPED_PAGE + offset, 1)
        else:
            operation(offset)
        assert core.cycles >= previous
        previous = core.cycles
    assert core.cycles > 0
