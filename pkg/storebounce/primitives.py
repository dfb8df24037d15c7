"""
Store-to-load forwarding primitives: Data Bounce, Fetch+Bounce and Speculative Fetch+Bounce.
"""
from __future__ import annotations

import collections
import dataclasses
import enum
import logging
import typing as T
from typing import Final

from .addrspace import Mapped
from .addrspace import PAGE_SHIFT
from .addrspace import PAGE_SIZE
from .addrspace import USER_DATA
from .exceptions import AmbiguousHit
from .exceptions import NoHit
from .models import SpectreGadget
from .transient import predictor_for
from .transient import Suppression
from .transient import transient_window
from .uarch import AccessKind
from .uarch import CacheEvictionBuffer
from .uarch import Core

logger = logging.getLogger(__name__)

PROBE_PAGES: Final = 256
PROBE_BASE: Final = 0x0000100000000000
DEFAULT_MARKER: Final = 0x42
# A store to a page whose translation is not cached never forwards on the first window
BOUNCE_ATTEMPTS: Final = 2
FETCH_MAX_RETRY: Final = 2
TRAINING_CALLS: Final = 4


class Decoder(str, enum.Enum):
    FLUSH_RELOAD = "flush-reload"
    EVICT_RELOAD = "evict-reload"


class TlbClass(str, enum.Enum):
    TLB_HIT = "tlb-hit"
    TLB_MISS = "tlb-miss"
    INVALID = "invalid"


@dataclasses.dataclass(frozen=True)
class ProbeArray:
    """256 user pages; page ``i`` encodes the byte value ``i``."""

    base: int = PROBE_BASE
    n_pages: int = PROBE_PAGES

    @classmethod
    def allocate(cls, core: Core, base: int = PROBE_BASE) -> ProbeArray:
        if not isinstance(core.space.translate(base), Mapped):
            core.space.map_region(base, PROBE_PAGES, USER_DATA)
        return cls(base=base)

    def page(self, value: int) -> int:
        return self.base + value * PAGE_SIZE

    def contains(self, vaddr: int) -> bool:
        return self.base <= vaddr < self.base + self.n_pages * PAGE_SIZE


@dataclasses.dataclass(frozen=True)
class BounceOutcome:
    bounced: bool
    decoded_value: T.Optional[int]
    attempts: int


@dataclasses.dataclass(frozen=True)
class FetchBounceClass:
    retry: int

    @property
    def tlb_class(self) -> TlbClass:
        if self.retry == 0:
            return TlbClass.TLB_HIT
        if self.retry == 1:
            return TlbClass.TLB_MISS
        return TlbClass.INVALID

    @property
    def tlb_hit(self) -> bool:
        return self.retry == 0


# Covert channel


def flush_probe(core: Core, probe: ProbeArray) -> None:
    for value in range(probe.n_pages):
        core.flush_line(probe.page(value))


def decode_flush_reload(core: Core, probe: ProbeArray) -> set[int]:
    """Reload every probe page, return those that were cached and flush them again."""
    hot = set()
    for value in range(probe.n_pages):
        address = probe.page(value)
        if core.is_hit(core.timed_access(address)):
            hot.add(value)
        core.flush_line(address)
    return hot


def evict_cache(core: Core, buffer: CacheEvictionBuffer) -> None:
    for address in buffer.addresses():
        translation = T.cast(Mapped, core.space.translate(address))
        core.cache.access((translation.frame, (address % PAGE_SIZE) // 64))


def decode_evict_reload(core: Core, probe: ProbeArray, buffer: CacheEvictionBuffer) -> set[int]:
    """Reload every probe page, return those that were cached and evict the cache again."""
    hot = {value for value in range(probe.n_pages) if core.is_hit(core.timed_access(probe.page(value)))}
    evict_cache(core, buffer)
    return hot


def majority_decode(
    core: Core,
    probe: ProbeArray,
    encode: T.Callable[[], T.Any],
    repetitions: int = 9,
) -> set[int]:
    """Repeat ``encode`` + Flush+Reload and keep the pages that were hot in a strict majority of runs."""
    counts: collections.Counter[int] = collections.Counter()
    for _ in range(repetitions):
        flush_probe(core, probe)
        encode()
        counts.update(decode_flush_reload(core, probe))
    return {value for value, count in counts.items() if 2 * count > repetitions}


# Data Bounce


def _bounce_once(
    core: Core,
    p: int,
    x: int,
    probe: ProbeArray,
    kind: AccessKind,
    suppression: Suppression,
) -> None:
    with transient_window(core, suppression):
        core.store_issue(p, bytes([x]), kind=kind)
        value = core.load_issue(p, 1).value[0]
        core.load_issue(probe.page(value), 1)


def _retouch(core: Core, p: int, kind: AccessKind, suppression: Suppression) -> None:
    with transient_window(core, suppression):
        core.store_issue(p, bytes([DEFAULT_MARKER]), kind=kind)
        core.load_issue(p, 1)


def data_bounce(
    core: Core,
    p: int,
    x: int = DEFAULT_MARKER,
    probe: T.Optional[ProbeArray] = None,
    decoder: Decoder = Decoder.FLUSH_RELOAD,
    *,
    scan: bool = True,
    attempts: int = BOUNCE_ATTEMPTS,
    kind: AccessKind = AccessKind.DATA,
    suppression: Suppression = Suppression.TSX_LIKE,
    cache_eviction: T.Optional[CacheEvictionBuffer] = None,
) -> BounceOutcome:
    """
    Test whether the virtual address ``p`` is backed by a physical page.

    Inside a transient window ``x`` is stored to ``p``, loaded back and encoded into ``probe``. The window
    runs ``attempts`` times before decoding, so the page walk started by the first store lets the next
    one forward. With ``scan=True`` every probe page is reloaded, otherwise only the marker page.

    Afterwards the translation of ``p`` is cached in the TLB of ``kind`` whenever ``p`` is mapped; callers
    that need a cold TLB must evict it. The full scan touches every probe page, so ``p`` is touched again
    in one more window after decoding.
    """
    if not 1 <= x <= 255:
        raise ValueError(f"'x' must be a non-zero byte: {x}")
    if attempts < 1:
        raise ValueError(f"'attempts' must be positive: {attempts}")
    if probe is None:
        probe = ProbeArray.allocate(core)
    if probe.contains(p):
        raise ValueError(f"'p' must not be inside the probe array: {p:#x}")
    if decoder == Decoder.EVICT_RELOAD and cache_eviction is None:
        cache_eviction = CacheEvictionBuffer(core.space, core.profile)

    if decoder == Decoder.EVICT_RELOAD:
        evict_cache(core, T.cast(CacheEvictionBuffer, cache_eviction))
    elif scan:
        flush_probe(core, probe)
    else:
        core.flush_line(probe.page(x))

    for _ in range(attempts):
        _bounce_once(core, p, x, probe, kind, suppression)

    if scan:
        if decoder == Decoder.EVICT_RELOAD:
            hot = decode_evict_reload(core, probe, T.cast(CacheEvictionBuffer, cache_eviction))
        else:
            hot = decode_flush_reload(core, probe)
        bounced = x in hot
        others = hot - {x}
        decoded = x if bounced else (others.pop() if len(others) == 1 else None)
        _retouch(core, p, kind, suppression)
    else:
        bounced = core.is_hit(core.timed_access(probe.page(x)))
        decoded = x if bounced else None
    logger.debug("data_bounce(%#x): bounced=%s", p, bounced)
    return BounceOutcome(bounced=bounced, decoded_value=decoded, attempts=attempts)


# Fetch+Bounce


def fetch_bounce(
    core: Core,
    p: int,
    x: int = DEFAULT_MARKER,
    probe: T.Optional[ProbeArray] = None,
    max_retry: int = FETCH_MAX_RETRY,
    kind: AccessKind = AccessKind.DATA,
) -> FetchBounceClass:
    """
    Classify the TLB state of ``p`` by the number of failed bounces before the first success.

    ``retry == 0`` means the translation was cached, ``1`` that the first window started a page walk and
    anything above marks an unmapped page.
    """
    if probe is None:
        probe = ProbeArray.allocate(core)
    for retry in range(max_retry + 1):
        if data_bounce(core, p, x, probe, scan=False, attempts=1, kind=kind).bounced:
            return FetchBounceClass(retry=retry)
    return FetchBounceClass(retry=max_retry)


def fetch_bounce_itlb(
    core: Core,
    p: int,
    x: int = DEFAULT_MARKER,
    probe: T.Optional[ProbeArray] = None,
    max_retry: int = FETCH_MAX_RETRY,
) -> FetchBounceClass:
    """Fetch+Bounce against the iTLB: the store resolves through instruction translations."""
    return fetch_bounce(core, p, x, probe, max_retry, kind=AccessKind.FETCH)


# Speculative Fetch+Bounce


def invoke_gadget(core: Core, gadget: SpectreGadget, index: int) -> None:
    """A system call running the bounds-checked gadget in the kernel with a user-chosen ``index``."""
    predictor = predictor_for(core)

    def body() -> None:
        value = core.load_issue(gadget.data_base + index, 1).value[0]
        core.load_issue(gadget.oracle_base + value * PAGE_SIZE, 1)

    with core.kernel_mode():
        predictor.speculate(gadget.site, index < gadget.bounds, body)


def mistrain(core: Core, gadget: SpectreGadget, calls: int = TRAINING_CALLS, train_index: int = 0) -> None:
    for _ in range(calls):
        invoke_gadget(core, gadget, train_index)


def speculative_fetch_bounce(
    core: Core,
    gadget: SpectreGadget,
    index: int,
    tlb_probe: T.Optional[T.Sequence[int]] = None,
    x: int = DEFAULT_MARKER,
    probe: T.Optional[ProbeArray] = None,
    *,
    train_index: int = 0,
) -> int:
    """
    Leak ``data[index]`` of ``gadget`` through the dTLB.

    For every page ``i`` of ``tlb_probe`` (the gadget's oracle by default): keep the branch trained, evict
    the TLB set of page ``i``, call the gadget out of bounds and Fetch+Bounce page ``i``. The index of the
    only page found in the TLB is the leaked byte.
    """
    if probe is None:
        probe = ProbeArray.allocate(core)
    if tlb_probe is None:
        tlb_probe = [gadget.oracle_base + value * PAGE_SIZE for value in range(256)]
    pages = list(tlb_probe)
    predictor = predictor_for(core)
    mistrain(core, gadget, train_index=train_index)
    hits = []
    for value, page in enumerate(pages):
        while not predictor.predict(gadget.site):
            invoke_gadget(core, gadget, train_index)
        core.tlb_evict_vpn(AccessKind.DATA, page >> PAGE_SHIFT)
        invoke_gadget(core, gadget, index)
        if fetch_bounce(core, page, x, probe).tlb_hit:
            hits.append(value)
    if not hits:
        raise NoHit(f"No oracle page was cached for index {index}")
    if len(hits) > 1:
        raise AmbiguousHit(hits)
    return hits[0]
