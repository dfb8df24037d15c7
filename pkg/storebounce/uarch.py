"""
Microarchitectural state of a simulated core: the store buffer, the TLBs and the data cache.

Everything here is deterministic given the seed of the core. The only randomness is the timing noise
that flips hit/miss classifications of :meth:`Core.timed_access`.
"""
from __future__ import annotations

import collections
import contextlib
import dataclasses
import enum
import logging
import math
import typing as T
from typing import Final

import numpy as np

from ._common import _resolve_rng
from .addrspace import AddressSpace
from .addrspace import Mapped
from .addrspace import NonCanonical
from .addrspace import NotMapped
from .addrspace import PAGE_MASK
from .addrspace import PAGE_SHIFT
from .addrspace import PAGE_SIZE
from .addrspace import SYNTHETIC_FRAME
from .addrspace import Translation
from .addrspace import USER_DATA
from .custom_types import Cycles
from .custom_types import Frame
from .custom_types import SeedLike
from .custom_types import Vpn
from .exceptions import ArchitecturalFault
from .exceptions import StallError
from .exceptions import TxStateError
from .exceptions import WindowStateError
from .models import MicroarchProfile

if T.TYPE_CHECKING:  # pragma: no cover
    from .transient import BranchPredictor
    from .transient import Transaction
    from .transient import TransientWindow

logger = logging.getLogger(__name__)

LINE_SIZE: Final = 64
STORE_SIZES: Final = frozenset({1, 2, 4, 8, 16, 32})
MAX_LOAD_SIZE: Final = 32
EVICTION_BUFFER_BASE: Final = 0x00006F0000000000
CACHE_EVICTION_BASE: Final = 0x00006E0000000000

Line = T.Tuple[Frame, int]


class AccessKind(str, enum.Enum):
    DATA = "d"
    FETCH = "i"


class LoadSource(str, enum.Enum):
    STORE_FORWARD = "store-forward"
    WT_FORWARD = "wt-forward"
    CACHE_OR_MEMORY = "cache-or-memory"
    SQUASHED = "squashed"


@dataclasses.dataclass
class StoreBufferEntry:
    vaddr: int
    data: bytes
    resolved_frame: T.Optional[Frame] = None
    transient: bool = False
    kind: AccessKind = AccessKind.DATA
    tx_id: T.Optional[int] = None

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def vpn(self) -> Vpn:
        return self.vaddr >> PAGE_SHIFT

    @property
    def offset(self) -> int:
        return self.vaddr & PAGE_MASK

    @property
    def resolved(self) -> bool:
        return self.resolved_frame is not None

    def overlaps(self, offset: int, size: int) -> bool:
        return self.offset < offset + size and offset < self.offset + self.size

    def covers(self, offset: int, size: int) -> bool:
        return self.offset <= offset and offset + size <= self.offset + self.size


@dataclasses.dataclass(frozen=True)
class LoadResult:
    value: bytes
    source: LoadSource
    faulted: bool = False


class Tlb:
    """A set-associative translation cache with LRU replacement inside each set."""

    def __init__(self, sets: int, ways: int) -> None:
        if sets < 1 or ways < 1:
            raise ValueError(f"A TLB needs at least one set and one way: {sets}x{ways}")
        self.sets = sets
        self.ways = ways
        # Each set is ordered from least to most recently used
        self._sets: list[collections.OrderedDict[Vpn, Frame]] = [
            collections.OrderedDict() for _ in range(sets)
        ]

    def __contains__(self, vpn: Vpn) -> bool:
        return vpn in self._sets[vpn % self.sets]

    def __len__(self) -> int:
        return sum(len(entries) for entries in self._sets)

    def lookup(self, vpn: Vpn, touch: bool = True) -> T.Optional[Frame]:
        entries = self._sets[vpn % self.sets]
        frame = entries.get(vpn)
        if frame is not None and touch:
            entries.move_to_end(vpn)
        return frame

    def insert(self, vpn: Vpn, frame: Frame) -> T.Optional[Vpn]:
        """Insert a translation and return the vpn it displaced, if any."""
        entries = self._sets[vpn % self.sets]
        evicted = None
        if vpn in entries:
            entries.move_to_end(vpn)
        elif len(entries) >= self.ways:
            evicted, _ = entries.popitem(last=False)
        entries[vpn] = frame
        return evicted

    def flush(self) -> None:
        for entries in self._sets:
            entries.clear()

    def entries(self) -> list[tuple[Vpn, Frame, int]]:
        """``(vpn, frame, lru_rank)`` triplets; rank 0 is the most recently used way of its set."""
        triplets = []
        for entries in self._sets:
            for rank, (vpn, frame) in enumerate(reversed(entries.items())):
                triplets.append((vpn, frame, rank))
        return triplets


class TlbState:
    """The data and instruction TLBs. Hyperthreads of a physical core share one instance."""

    def __init__(self, dtlb_geometry: tuple[int, int], itlb_geometry: tuple[int, int]) -> None:
        self.dtlb = Tlb(*dtlb_geometry)
        self.itlb = Tlb(*itlb_geometry)

    @classmethod
    def from_profile(cls, profile: MicroarchProfile) -> TlbState:
        return cls(profile.dtlb_geometry, profile.itlb_geometry)

    def __getitem__(self, kind: AccessKind) -> Tlb:
        return self.dtlb if kind == AccessKind.DATA else self.itlb


class CacheState:
    """A fully associative LRU data cache of ``capacity`` lines, keyed by ``(frame, line index)``."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError(f"'capacity' must be positive: {capacity}")
        self.capacity = capacity
        self._lines: collections.OrderedDict[Line, None] = collections.OrderedDict()

    def __contains__(self, line: Line) -> bool:
        return line in self._lines

    def __len__(self) -> int:
        return len(self._lines)

    def access(self, line: Line) -> bool:
        """Bring ``line`` in and return whether it was already cached."""
        if line in self._lines:
            self._lines.move_to_end(line)
            return True
        self._lines[line] = None
        if len(self._lines) > self.capacity:
            self._lines.popitem(last=False)
        return False

    def flush(self, line: Line) -> None:
        self._lines.pop(line, None)


class EvictionBuffer:
    """
    User pages from which TLB eviction sets are built.

    The buffer spans ``max(sets * (ways + 1))`` pages over both TLBs, so every set index of either TLB is
    covered by at least ``ways + 1`` congruent pages.
    """

    def __init__(
        self,
        space: AddressSpace,
        profile: MicroarchProfile,
        base: int = EVICTION_BUFFER_BASE,
    ) -> None:
        geometries = (profile.dtlb_geometry, profile.itlb_geometry)
        self.n_pages = max(sets * (ways + 1) for sets, ways in geometries)
        self.base = base
        self.base_vpn = base >> PAGE_SHIFT
        if not isinstance(space.translate(base), Mapped):
            space.map_region(base, self.n_pages, USER_DATA)

    def congruent(self, target_vpn: Vpn, sets: int, count: int) -> list[int]:
        """Return ``count`` buffer addresses that share the TLB set of ``target_vpn``."""
        first = self.base_vpn + (target_vpn - self.base_vpn) % sets
        vpns = [vpn for vpn in range(first, self.base_vpn + self.n_pages, sets) if vpn != target_vpn]
        if len(vpns) < count:
            raise ValueError(f"Eviction buffer too small for {count} congruent pages")
        return [vpn << PAGE_SHIFT for vpn in vpns[:count]]


class CacheEvictionBuffer:
    """User pages with twice as many lines as the cache; sweeping them evicts every other line."""

    def __init__(
        self,
        space: AddressSpace,
        profile: MicroarchProfile,
        base: int = CACHE_EVICTION_BASE,
    ) -> None:
        lines_per_page = PAGE_SIZE // LINE_SIZE
        self.n_pages = math.ceil(2 * profile.cache_lines / lines_per_page)
        self.base = base
        if not isinstance(space.translate(base), Mapped):
            space.map_region(base, self.n_pages, USER_DATA)

    def addresses(self) -> T.Iterator[int]:
        for page in range(self.n_pages):
            for line in range(PAGE_SIZE // LINE_SIZE):
                yield self.base + page * PAGE_SIZE + line * LINE_SIZE


class Core:
    """
    One logical CPU.

    Stores issued outside a transient window update memory immediately and stay in the store buffer
    until :meth:`drain`. Stores issued inside a window never reach memory and are squashed when the window
    closes. A faulting access raises :class:`ArchitecturalFault` unless a window or a transaction
    suppresses it.
    """

    def __init__(
        self,
        space: AddressSpace,
        profile: MicroarchProfile,
        *,
        seed: SeedLike | np.random.Generator = None,
        tlb: T.Optional[TlbState] = None,
        name: str = "cpu0",
    ) -> None:
        self.space = space
        self.profile = profile
        self.name = name
        self.tlb = tlb if tlb is not None else TlbState.from_profile(profile)
        self.cache = CacheState(profile.cache_lines)
        self.store_buffer: list[StoreBufferEntry] = []
        self.cycles: Cycles = 0
        self.rng = _resolve_rng(seed)
        self.supervisor = False
        self.window: T.Optional[TransientWindow] = None
        self.tx: T.Optional[Transaction] = None
        self.predictor: T.Optional[BranchPredictor] = None
        self._pending_walks: list[tuple[AccessKind, Vpn, Frame, StoreBufferEntry]] = []
        self._eviction_buffer: T.Optional[EvictionBuffer] = None

    def __repr__(self) -> str:
        return f"Core(name={self.name!r}, profile={self.profile.name!r}, cycles={self.cycles})"

    def sibling(self, seed: SeedLike | np.random.Generator = None, name: T.Optional[str] = None) -> Core:
        """Return the hyperthread sibling: same address space and TLBs, its own cache view and buffer."""
        return Core(
            self.space,
            self.profile,
            seed=seed,
            tlb=self.tlb,
            name=name or f"{self.name}-sibling",
        )

    @property
    def suppressed(self) -> bool:
        return self.window is not None or self.tx is not None

    @contextlib.contextmanager
    def kernel_mode(self) -> T.Iterator[Core]:
        """Execute the body with supervisor privileges, e.g. a system call."""
        previous = self.supervisor
        self.supervisor = True
        try:
            yield self
        finally:
            self.supervisor = previous

    # Faults

    def _fault_reason(self, translation: Translation, *, write: bool = False) -> T.Optional[str]:
        if translation is NonCanonical:
            return "non-canonical address"
        if translation is NotMapped:
            return "page not present"
        flags = T.cast(Mapped, translation).flags
        if flags.protected_region:
            return "protected page"
        if not flags.user_accessible and not self.supervisor:
            return "supervisor page"
        if write and not flags.writable:
            return "read-only page"
        return None

    def _check_fault(self, vaddr: int, reason: T.Optional[str]) -> None:
        if reason is not None and not self.suppressed:
            raise ArchitecturalFault(vaddr, reason)

    def _abort_on_fault(self, reason: T.Optional[str]) -> bool:
        """A fault inside a transaction (and outside a window) aborts the transaction."""
        if reason is not None and self.tx is not None and self.window is None:
            logger.debug("%s: transaction aborted by fault: %s", self.name, reason)
            self.abort_transaction()
            return True
        return False

    # Translation and cache fills

    def _fill(self, kind: AccessKind, vpn: Vpn, frame: Frame, offset: int) -> Cycles:
        cycles = 0
        tlb = self.tlb[kind]
        if tlb.lookup(vpn) is None:
            tlb.insert(vpn, frame)
            cycles += self.profile.lat_walk
        hit = self.cache.access((frame, offset // LINE_SIZE))
        cycles += self.profile.lat_cache_hit if hit else self.profile.lat_cache_miss
        self.cycles += cycles
        return cycles

    # Stores

    def store_issue(self, vaddr: int, data: bytes, kind: AccessKind = AccessKind.DATA) -> None:
        """
        Append a store to the store buffer.

        The store's physical address resolves immediately when the translation is cached in the TLB of
        ``kind``. Inside a transient window a TLB miss schedules a page walk that completes (inserting the
        TLB entry) only when the window closes; outside a window the walk completes right away. Stores to
        unmapped pages never resolve and stores to non-canonical addresses resolve to a synthetic frame.
        """
        data = bytes(data)
        if len(data) not in STORE_SIZES:
            raise ValueError(f"Store size must be one of {sorted(STORE_SIZES)}: {len(data)}")
        if (vaddr & PAGE_MASK) + len(data) > PAGE_SIZE:
            raise ValueError(f"Store crosses a page boundary: {vaddr:#x}")
        capacity = self.profile.store_buffer_capacity
        if len(self.store_buffer) >= capacity:
            raise StallError(f"Store buffer is full: {capacity} entries")

        translation = self.space.translate(vaddr)
        reason = self._fault_reason(translation, write=True)
        self._check_fault(vaddr, reason)
        self.cycles += 1
        if self._abort_on_fault(reason):
            return

        entry = StoreBufferEntry(vaddr=vaddr, data=data, transient=self.window is not None, kind=kind)
        if translation is NonCanonical:
            entry.resolved_frame = SYNTHETIC_FRAME
        elif isinstance(translation, Mapped):
            vpn = vaddr >> PAGE_SHIFT
            tlb = self.tlb[kind]
            if tlb.lookup(vpn) is not None:
                entry.resolved_frame = translation.frame
            elif self.window is not None:
                self._pending_walks.append((kind, vpn, translation.frame, entry))
            else:
                tlb.insert(vpn, translation.frame)
                self.cycles += self.profile.lat_walk
                entry.resolved_frame = translation.frame
            if self.tx is not None:
                self.tx.touched_vpns.add(vpn)

        if reason is None and self.window is None:
            frame = T.cast(Mapped, translation).frame
            line = (frame, (vaddr & PAGE_MASK) // LINE_SIZE)
            self.cache.access(line)
            if self.tx is not None:
                entry.tx_id = self.tx.tx_id
                self.tx.write_lines.add(line)
            else:
                self.space.write_frame(frame, vaddr & PAGE_MASK, data)
        self.store_buffer.append(entry)

    def drain(self) -> None:
        """Retire every committed store; they are already visible in memory."""
        self.store_buffer = [
            entry for entry in self.store_buffer if entry.transient or entry.tx_id is not None
        ]

    # Loads and fetches

    def load_issue(self, vaddr: int, size: int = 1) -> LoadResult:
        """
        Execute a load, searching the store buffer from the youngest entry to the oldest.

        A resolved entry on the same virtual page that contains the load forwards its data, even to a
        faulting load. An overlapping unresolved entry blocks forwarding. With ``wtf_enabled`` a faulting
        load may additionally receive data from any resolved entry that covers its page offset.
        """
        if not 1 <= size <= MAX_LOAD_SIZE:
            raise ValueError(f"Load size must be in [1, {MAX_LOAD_SIZE}]: {size}")
        offset = vaddr & PAGE_MASK
        if offset + size > PAGE_SIZE:
            raise ValueError(f"Load crosses a page boundary: {vaddr:#x}")

        translation = self.space.translate(vaddr)
        reason = self._fault_reason(translation)
        self._check_fault(vaddr, reason)
        vpn = vaddr >> PAGE_SHIFT
        if isinstance(translation, Mapped):
            self._fill(AccessKind.DATA, vpn, translation.frame, offset)
            if self.tx is not None:
                self.tx.touched_vpns.add(vpn)
        else:
            self.cycles += self.profile.lat_cache_miss
        if self._abort_on_fault(reason):
            return LoadResult(bytes(size), LoadSource.SQUASHED, faulted=True)

        faulted = reason is not None
        forwarded = self._forward(vpn, offset, size, faulted)
        if forwarded is not None:
            return forwarded
        if faulted:
            return LoadResult(bytes(size), LoadSource.CACHE_OR_MEMORY, faulted=True)
        frame = T.cast(Mapped, translation).frame
        return LoadResult(self.space.read_frame(frame, offset, size), LoadSource.CACHE_OR_MEMORY)

    def _forward(self, vpn: Vpn, offset: int, size: int, faulted: bool) -> T.Optional[LoadResult]:
        for entry in reversed(self.store_buffer):
            if entry.vpn == vpn and entry.overlaps(offset, size):
                if entry.resolved and entry.covers(offset, size):
                    start = offset - entry.offset
                    return LoadResult(entry.data[start : start + size], LoadSource.STORE_FORWARD, faulted)
                break
        if faulted and self.profile.wtf_enabled:
            for entry in reversed(self.store_buffer):
                if entry.resolved and entry.offset <= offset < entry.offset + entry.size:
                    value = bytes(
                        entry.data[position - entry.offset] if position < entry.offset + entry.size else 0
                        for position in range(offset, offset + size)
                    )
                    return LoadResult(value, LoadSource.WT_FORWARD, True)
        return None

    def fetch_issue(self, vaddr: int) -> None:
        """Fetch the instruction at ``vaddr``: fills the iTLB and the cache line."""
        translation = self.space.translate(vaddr)
        reason = self._fault_reason(translation)
        self._check_fault(vaddr, reason)
        if isinstance(translation, Mapped):
            vpn = vaddr >> PAGE_SHIFT
            self._fill(AccessKind.FETCH, vpn, translation.frame, vaddr & PAGE_MASK)
            if self.tx is not None:
                self.tx.touched_vpns.add(vpn)
        self._abort_on_fault(reason)

    # Timing

    def timed_access(self, vaddr: int) -> Cycles:
        """Access ``vaddr`` and return its latency; with ``noise_p`` the hit/miss outcome is flipped."""
        translation = self.space.translate(vaddr)
        self._check_fault(vaddr, self._fault_reason(translation))
        if not isinstance(translation, Mapped):
            self.cycles += self.profile.lat_cache_miss
            return self.profile.lat_cache_miss
        vpn = vaddr >> PAGE_SHIFT
        walk = 0
        if self.tlb.dtlb.lookup(vpn) is None:
            self.tlb.dtlb.insert(vpn, translation.frame)
            walk = self.profile.lat_walk
        line = (translation.frame, (vaddr & PAGE_MASK) // LINE_SIZE)
        hit = self.cache.access(line)
        if self.profile.noise_p and self.rng.random() < self.profile.noise_p:
            hit = not hit
        latency = (self.profile.lat_cache_hit if hit else self.profile.lat_cache_miss) + walk
        self.cycles += latency
        return latency

    def is_hit(self, latency: Cycles) -> bool:
        return latency < self.profile.hit_threshold

    def flush_line(self, vaddr: int) -> None:
        """Evict the cache line of ``vaddr``; the TLB is not touched."""
        translation = self.space.translate(vaddr)
        self._check_fault(vaddr, self._fault_reason(translation))
        self.cycles += 1
        if isinstance(translation, Mapped):
            self.cache.flush((translation.frame, (vaddr & PAGE_MASK) // LINE_SIZE))

    # TLB maintenance

    def tlb_lookup(self, kind: AccessKind, vpn: Vpn) -> bool:
        """Peek into the TLB without updating the LRU order."""
        return self.tlb[kind].lookup(vpn, touch=False) is not None

    def tlb_insert(self, kind: AccessKind, vpn: Vpn, frame: Frame) -> T.Optional[Vpn]:
        return self.tlb[kind].insert(vpn, frame)

    def tlb_flush_all(self, kind: AccessKind) -> None:
        self.tlb[kind].flush()

    @property
    def eviction_buffer(self) -> EvictionBuffer:
        if self._eviction_buffer is None:
            self._eviction_buffer = EvictionBuffer(self.space, self.profile)
        return self._eviction_buffer

    def tlb_evict_vpn(self, kind: AccessKind, target_vpn: Vpn) -> None:
        """Access ``ways + 1`` user pages congruent to ``target_vpn`` so its TLB set is fully replaced."""
        tlb = self.tlb[kind]
        for vaddr in self.eviction_buffer.congruent(target_vpn, tlb.sets, tlb.ways + 1):
            translation = T.cast(Mapped, self.space.translate(vaddr))
            self._fill(kind, vaddr >> PAGE_SHIFT, translation.frame, 0)

    # Transient windows and transactions

    def open_window(self, window: TransientWindow) -> None:
        if self.window is not None:
            raise WindowStateError(f"{self.name}: transient windows do not nest")
        self.window = window

    def close_window(self) -> TransientWindow:
        """Squash the transient stores, complete the pending page walks and charge the window overhead."""
        window = self.window
        if window is None:
            raise WindowStateError(f"{self.name}: no transient window is open")
        window.squash_log.extend(entry for entry in self.store_buffer if entry.transient)
        self.store_buffer = [entry for entry in self.store_buffer if not entry.transient]
        for kind, vpn, frame, entry in self._pending_walks:
            self.tlb[kind].insert(vpn, frame)
            entry.resolved_frame = frame
            self.cycles += self.profile.lat_walk
        self._pending_walks.clear()
        self.cycles += window.overhead_cycles
        self.window = None
        return window

    def begin_transaction(self, tx: Transaction) -> None:
        if self.tx is not None:
            raise TxStateError(f"{self.name}: a transaction is already active")
        self.tx = tx

    def commit_transaction(self) -> None:
        tx = self._active_tx()
        for entry in self.store_buffer:
            if entry.tx_id == tx.tx_id:
                frame = T.cast(int, entry.resolved_frame)
                self.space.write_frame(frame, entry.offset, entry.data)
                entry.tx_id = None
        tx.mark_committed()
        self.tx = None

    def abort_transaction(self) -> None:
        """Discard the stores of the transaction and invalidate its write set; TLB entries survive."""
        tx = self._active_tx()
        self.store_buffer = [entry for entry in self.store_buffer if entry.tx_id != tx.tx_id]
        for line in tx.write_lines:
            self.cache.flush(line)
        tx.mark_aborted()
        self.tx = None

    def _active_tx(self) -> Transaction:
        if self.tx is None:
            raise TxStateError(f"{self.name}: no transaction is active")
        return self.tx
