"""
End-to-end attacks built on the forwarding primitives.

Attacks only receive a :class:`~storebounce.uarch.Core`; the layout they search for is never passed in and
is used by :mod:`storebounce.harness` for scoring only.
"""
from __future__ import annotations

import collections
import logging
import math
import typing as T
from typing import Final

import numpy as np

from ._common import _ambiguity_retrying
from .addrspace import DIRECT_MAP_ALIGN
from .addrspace import DIRECT_MAP_SLOTS
from .addrspace import DIRECT_MAP_START
from .addrspace import KASLR_RANGES
from .addrspace import KERNEL_ALIGN
from .addrspace import KERNEL_DATA
from .addrspace import MODULE_REGION_PAGES
from .addrspace import MODULE_REGIONS
from .addrspace import PAGE_SHIFT
from .addrspace import PAGE_SIZE
from .addrspace import AddressSpace
from .exceptions import AmbiguousHit
from .exceptions import NoHit
from .exceptions import NotFound
from .models import ActivityEvent
from .models import ActivityPeriod
from .models import ActivityTrace
from .models import Extent
from .models import LeakResult
from .models import Observation
from .models import OSProfile
from .models import SearchReport
from .models import SpectreGadget
from .models import TxScript
from .primitives import data_bounce
from .primitives import DEFAULT_MARKER
from .primitives import fetch_bounce
from .primitives import fetch_bounce_itlb
from .primitives import ProbeArray
from .primitives import speculative_fetch_bounce
from .transient import tx_abort
from .transient import tx_begin
from .uarch import AccessKind
from .uarch import Core
from .utils import contiguous_runs
from .utils import majority

logger = logging.getLogger(__name__)

DIRECT_MAP_RETRIES: Final = 3
DIRECT_MAP_CONFIRM_PAGES: Final = 2
MODULE_RETRIES: Final = 32
ACTIVITY_LOWER_BOUND: Final = 5
SPECTRE_REPEATS: Final = 3
SPECTRE_MEASUREMENTS_PER_VOTE: Final = 6
SPECTRE_AMBIGUITY_RETRIES: Final = 3
SPECTRE_DATA_BASE: Final = 0xFFFFC90000000000
SPECTRE_ORACLE_OFFSET: Final = 1 << 20


def bounce_vote(
    core: Core,
    p: int,
    probe: ProbeArray,
    tests: int = 1,
    x: int = DEFAULT_MARKER,
) -> tuple[bool, int]:
    """Majority of up to ``tests`` Data Bounce tests, stopping as soon as the majority is settled."""
    needed = tests // 2 + 1
    yes = no = 0
    while yes < needed and no < needed and yes + no < tests:
        if data_bounce(core, p, x, probe, scan=False).bounced:
            yes += 1
        else:
            no += 1
    return yes > no, yes + no


def _observe(core: Core, candidate: int, probe: ProbeArray, tests: int) -> Observation:
    start = core.cycles
    bounced, used = bounce_vote(core, candidate, probe, tests)
    return Observation(candidate=candidate, bounced=bounced, tests=used, cycles=core.cycles - start)


def break_kaslr(
    core: Core,
    os_profile: OSProfile = OSProfile.LINUX,
    *,
    retries: int = 1,
    full_scan: bool = False,
    probe: T.Optional[ProbeArray] = None,
) -> SearchReport:
    """
    Scan the 2 MiB aligned KASLR slots of ``os_profile`` from the bottom up.

    The first bouncing slot is the kernel base. The consecutive slots that keep bouncing are the rest of
    the kernel image and are reported as ``aliases``. With ``full_scan`` every slot is tested.
    """
    probe = probe or ProbeArray.allocate(core)
    start, slots = KASLR_RANGES[OSProfile(os_profile)]
    logger.info("KASLR: Starting scan: %d candidates", slots)
    first_cycle = core.cycles
    recovered: T.Optional[int] = None
    aliases: list[int] = []
    observations = []
    for slot in range(slots):
        observation = _observe(core, start + slot * KERNEL_ALIGN, probe, retries)
        observations.append(observation)
        if observation.bounced:
            if recovered is None:
                recovered = observation.candidate
            else:
                aliases.append(observation.candidate)
        elif recovered is not None and not full_scan:
            break
    if recovered is None:
        logger.warning("KASLR: No candidate bounced")
        raise NotFound(f"No kernel found among {slots} candidates")
    logger.info("KASLR: Kernel base at %#x", recovered)
    return SearchReport(
        recovered=recovered,
        candidates_tested=len(observations),
        retries_per_candidate=retries,
        simulated_cycles=core.cycles - first_cycle,
        aliases=aliases,
        observations=observations,
    )


def find_direct_map(
    core: Core,
    *,
    start: int = DIRECT_MAP_START,
    n_candidates: int = DIRECT_MAP_SLOTS,
    retries: int = DIRECT_MAP_RETRIES,
    confirm_pages: int = DIRECT_MAP_CONFIRM_PAGES,
    probe: T.Optional[ProbeArray] = None,
) -> SearchReport:
    """
    Scan 1 GiB aligned candidates for the direct-physical map.

    A candidate counts only if it and its following ``confirm_pages`` pages win a majority of ``retries``
    tests each, which keeps timing noise from producing spurious hits.
    """
    probe = probe or ProbeArray.allocate(core)
    logger.info("Direct map: Starting scan: %d candidates", n_candidates)
    first_cycle = core.cycles
    observations = []
    recovered = None
    for slot in range(n_candidates):
        candidate = start + slot * DIRECT_MAP_ALIGN
        observation = _observe(core, candidate, probe, retries)
        if observation.bounced:
            for page in range(1, confirm_pages + 1):
                confirmation = _observe(core, candidate + page * PAGE_SIZE, probe, retries)
                if not confirmation.bounced:
                    logger.debug("Direct map: Candidate %#x failed confirmation", candidate)
                    observation = observation.model_copy(update={"bounced": False})
                    break
        observations.append(observation)
        if observation.bounced:
            recovered = candidate
            break
    if recovered is None:
        logger.warning("Direct map: No candidate bounced")
        raise NotFound(f"No direct-physical map found among {n_candidates} candidates")
    logger.info("Direct map: Found at %#x", recovered)
    return SearchReport(
        recovered=recovered,
        candidates_tested=len(observations),
        retries_per_candidate=retries,
        simulated_cycles=core.cycles - first_cycle,
        observations=observations,
    )


def scan_pages(
    core: Core,
    start: int,
    n_pages: int,
    *,
    repeats: int = 1,
    probe: T.Optional[ProbeArray] = None,
) -> SearchReport:
    """Test every page of ``[start, start + n_pages * 4096)``; ``recovered`` lists the bounced pages."""
    probe = probe or ProbeArray.allocate(core)
    first_cycle = core.cycles
    observations = [_observe(core, start + page * PAGE_SIZE, probe, repeats) for page in range(n_pages)]
    return SearchReport(
        recovered=[observation.candidate for observation in observations if observation.bounced],
        candidates_tested=n_pages,
        retries_per_candidate=repeats,
        simulated_cycles=core.cycles - first_cycle,
        observations=observations,
    )


def extents_from_pages(pages: T.Iterable[int]) -> list[Extent]:
    """Group mapped pages into extents; unmapped pages separate neighbouring extents."""
    return [
        Extent(start=vpn << PAGE_SHIFT, size_pages=count)
        for vpn, count in contiguous_runs(page >> PAGE_SHIFT for page in pages)
    ]


def enumerate_modules(
    core: Core,
    *,
    os_profile: OSProfile = OSProfile.LINUX,
    region_pages: int = MODULE_REGION_PAGES,
    repeats: int = 1,
    probe: T.Optional[ProbeArray] = None,
) -> list[Extent]:
    """Walk the module region in 4 KiB steps and report every contiguous run of mapped pages."""
    region = MODULE_REGIONS[OSProfile(os_profile)]
    logger.info("Modules: Starting scan: %d pages", region_pages)
    report = scan_pages(core, region, region_pages, repeats=repeats, probe=probe)
    extents = extents_from_pages(T.cast(T.List[int], report.recovered))
    logger.info("Modules: Found %d extents", len(extents))
    return extents


def classify_modules(
    extents: T.Sequence[Extent],
    public_table: T.Sequence[tuple[str, int]],
) -> list[Extent]:
    """Name every extent whose size appears exactly once in ``public_table``."""
    counts = collections.Counter(size for _, size in public_table)
    names = {size: name for name, size in public_table if counts[size] == 1}
    return [extent.model_copy(update={"name": names.get(extent.size_pages)}) for extent in extents]


def detect_protected_pages(
    core: Core,
    start: int,
    n_pages: int,
    *,
    repeats: int = 1,
    probe: T.Optional[ProbeArray] = None,
) -> set[int]:
    """Return the pages of the range backed by memory, including enclave pages no one may access."""
    report = scan_pages(core, start, n_pages, repeats=repeats, probe=probe)
    return set(T.cast(T.List[int], report.recovered))


def run_victim_transaction(core: Core, victim: TxScript) -> None:
    """The victim touches its pages inside a transaction that aborts before committing."""
    tx = tx_begin(core)
    for page in victim.touched:
        if victim.write:
            core.store_issue(page, b"\x01")
        else:
            core.load_issue(page, 1)
        if core.tx is not tx:
            return
    tx_abort(core, tx)


def tsx_atomicity_probe(
    core: Core,
    victim: TxScript,
    candidates: T.Sequence[int],
    *,
    probe: T.Optional[ProbeArray] = None,
) -> set[int]:
    """Evict the candidates, let the victim transaction run and abort, then find the vpns in the dTLB."""
    probe = probe or ProbeArray.allocate(core)
    for candidate in candidates:
        core.tlb_evict_vpn(AccessKind.DATA, candidate >> PAGE_SHIFT)
    run_victim_transaction(core, victim)
    hits = set()
    for candidate in candidates:
        if fetch_bounce(core, candidate, probe=probe).tlb_hit:
            hits.add(candidate >> PAGE_SHIFT)
    return hits


class KernelActivity:
    """Kernel code paths that touch module pages according to an event script."""

    def __init__(
        self,
        script: T.Sequence[ActivityEvent],
        module_pages: T.Mapping[str, T.Sequence[int]],
        rng: np.random.Generator,
    ) -> None:
        unknown = {event.module for event in script} - set(module_pages)
        if unknown:
            raise ValueError(f"Event script names unknown modules: {sorted(unknown)}")
        self.module_pages = module_pages
        self.rng = rng
        self._by_period: dict[int, list[ActivityEvent]] = collections.defaultdict(list)
        for event in script:
            self._by_period[event.period].append(event)

    def active_periods(self) -> set[int]:
        return set(self._by_period)

    def tick(self, core: Core, period: int) -> None:
        for event in self._by_period.get(period, ()):
            if event.rate < 1 and self.rng.random() >= event.rate:
                continue
            with core.kernel_mode():
                for page in self.module_pages[event.module][: event.pages_touched]:
                    core.fetch_issue(page)
                    core.load_issue(page, 1)


def monitor_activity(
    cores: tuple[Core, Core],
    target_pages: T.Sequence[int],
    reference_page: int,
    periods: int,
    samples_per_period: int = 5000,
    kernel_activity: T.Optional[KernelActivity] = None,
    *,
    lower_bound: int = ACTIVITY_LOWER_BOUND,
    probe: T.Optional[ProbeArray] = None,
) -> ActivityTrace:
    """
    Sample the TLB state of kernel pages from two hyperthreads.

    Each sample evicts the page from both TLBs, lets the sibling thread run the kernel, and Fetch+Bounces
    the page against the dTLB and the iTLB. A period is flagged when the target hits exceed both
    ``lower_bound`` and the hits of ``reference_page``.
    """
    probe = probe or ProbeArray.allocate(cores[0])
    pages = [*target_pages, reference_page]
    trace = ActivityTrace(lower_bound=lower_bound)
    for period in range(periods):
        hits_target = hits_reference = 0
        for sample in range(samples_per_period):
            attacker, victim = cores[sample % 2], cores[(sample + 1) % 2]
            page = pages[sample % len(pages)]
            vpn = page >> PAGE_SHIFT
            attacker.tlb_evict_vpn(AccessKind.DATA, vpn)
            attacker.tlb_evict_vpn(AccessKind.FETCH, vpn)
            if kernel_activity is not None:
                kernel_activity.tick(victim, period)
            hit = (
                fetch_bounce(attacker, page, probe=probe).tlb_hit
                or fetch_bounce_itlb(attacker, page, probe=probe).tlb_hit
            )
            if sample % len(pages) == len(pages) - 1:
                hits_reference += hit
            else:
                hits_target += hit
        detected = hits_target > lower_bound and hits_target > hits_reference
        logger.debug("Monitor: period %d: %d vs %d hits", period, hits_target, hits_reference)
        trace.periods.append(
            ActivityPeriod(hits_target=hits_target, hits_reference=hits_reference, detected=detected)
        )
    return trace


def plant_spectre_gadget(
    space: AddressSpace,
    secret: bytes,
    *,
    bounds: int = 16,
    data_base: int = SPECTRE_DATA_BASE,
    site: str = "gadget",
) -> SpectreGadget:
    """Map a kernel array of ``bounds`` zero bytes followed by ``secret`` plus its 256 page oracle."""
    n_data_pages = max(1, math.ceil((bounds + len(secret)) / PAGE_SIZE))
    if n_data_pages * PAGE_SIZE > SPECTRE_ORACLE_OFFSET:
        raise ValueError(f"Secret is too large: {len(secret)} bytes")
    space.map_region(data_base, n_data_pages, KERNEL_DATA)
    space.write_bytes(data_base, bytes(bounds) + bytes(secret))
    oracle_base = data_base + SPECTRE_ORACLE_OFFSET
    space.map_region(oracle_base, 256, KERNEL_DATA)
    return SpectreGadget(site=site, data_base=data_base, bounds=bounds, oracle_base=oracle_base)


def _measure(
    core: Core,
    gadget: SpectreGadget,
    index: int,
    probe: ProbeArray,
    retries: int,
) -> T.Optional[int]:
    try:
        for attempt in _ambiguity_retrying(retries):
            with attempt:
                return speculative_fetch_bounce(core, gadget, index, probe=probe)
    except (NoHit, AmbiguousHit) as exc:
        logger.debug("Spectre: index %d: %s", index, exc)
    return None


def spectre_leak(
    core: Core,
    gadget: SpectreGadget,
    secret_range: T.Iterable[int],
    *,
    repeats: int = SPECTRE_REPEATS,
    max_measurements: T.Optional[int] = None,
    ambiguity_retries: int = SPECTRE_AMBIGUITY_RETRIES,
    probe: T.Optional[ProbeArray] = None,
) -> LeakResult:
    """
    Leak ``data[index]`` for every index of ``secret_range``.

    Every byte is decided by a strict majority of ``repeats`` Speculative Fetch+Bounce votes. Measurements
    that find no oracle page are not votes; at most ``max_measurements`` (by default six per vote) are taken
    per byte. Bytes without a majority are erased: ``0x00`` in the data and their position in ``erasures``.
    """
    if repeats < 1:
        raise ValueError(f"'repeats' must be positive: {repeats}")
    if max_measurements is None:
        max_measurements = SPECTRE_MEASUREMENTS_PER_VOTE * repeats
    if max_measurements < repeats:
        raise ValueError(f"'max_measurements' must be at least 'repeats': {max_measurements}")
    probe = probe or ProbeArray.allocate(core)
    needed = repeats // 2 + 1
    leaked = bytearray()
    erasures: list[int] = []
    for position, index in enumerate(secret_range):
        votes: collections.Counter[int] = collections.Counter()
        for _ in range(max_measurements):
            value = _measure(core, gadget, index, probe, ambiguity_retries)
            if value is not None:
                votes[value] += 1
            if votes and (votes.most_common(1)[0][1] >= needed or sum(votes.values()) >= repeats):
                break
        byte = majority(votes.elements())
        if byte is None:
            logger.warning("Spectre: index %d: no majority in %d votes", index, sum(votes.values()))
            erasures.append(position)
            leaked.append(0)
        else:
            leaked.append(byte)
    return LeakResult(data=bytes(leaked), erasures=erasures)
