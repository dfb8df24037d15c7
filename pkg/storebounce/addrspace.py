"""
Virtual address space of the simulated machine and the randomized kernel layout that populates it.
"""
from __future__ import annotations

import enum
import logging
import typing as T
from typing import Final

import numpy as np

from ._common import _resolve_rng
from .custom_types import Frame
from .custom_types import ModuleRow
from .custom_types import SeedLike
from .custom_types import Vpn
from .exceptions import ModuleRegionOverflow
from .models import Extent
from .models import KernelLayout
from .models import OSProfile
from .models import PageFlags

logger = logging.getLogger(__name__)

PAGE_SHIFT: Final = 12
PAGE_SIZE: Final = 1 << PAGE_SHIFT
PAGE_MASK: Final = PAGE_SIZE - 1
MiB: Final = 1 << 20
GiB: Final = 1 << 30

KERNEL_ALIGN: Final = 2 * MiB
KERNEL_SIZE_PAGES: Final = 4096
LINUX_KERNEL_START: Final = 0xFFFFFFFF80000000
LINUX_KERNEL_SLOTS: Final = 512
WINDOWS_KERNEL_START: Final = 0xFFFFF80000000000
WINDOWS_KERNEL_SLOTS: Final = 8192

DIRECT_MAP_START: Final = 0xFFFF888000000000
DIRECT_MAP_ALIGN: Final = GiB
DIRECT_MAP_SLOTS: Final = 2**16
DIRECT_MAP_PAGES: Final = 64

MODULE_REGION_PAGES: Final = GiB // PAGE_SIZE
LINUX_MODULE_REGION: Final = 0xFFFFFFFFC0000000
WINDOWS_MODULE_REGION: Final = 0xFFFFF80400000000
MODULE_START_PAGES: Final = 1024
MODULE_MAX_GAP: Final = 16

ENCLAVE_REGION: Final = 0x00007F0000000000
ENCLAVE_REGION_PAGES: Final = 4096

# Frame used for stores to non-canonical addresses; no real frame ever gets this number
SYNTHETIC_FRAME: Final = (1 << 40) - 1

KERNEL_TEXT: Final = PageFlags(user_accessible=False, writable=False)
KERNEL_DATA: Final = PageFlags(user_accessible=False, writable=True)
USER_DATA: Final = PageFlags(user_accessible=True, writable=True)
ENCLAVE: Final = PageFlags(user_accessible=False, writable=True, protected_region=True)

KASLR_RANGES: Final = {
    OSProfile.LINUX: (LINUX_KERNEL_START, LINUX_KERNEL_SLOTS),
    OSProfile.WINDOWS: (WINDOWS_KERNEL_START, WINDOWS_KERNEL_SLOTS),
}
MODULE_REGIONS: Final = {
    OSProfile.LINUX: LINUX_MODULE_REGION,
    OSProfile.WINDOWS: WINDOWS_MODULE_REGION,
}

# A public module table: names and sizes in pages as listed by /proc/modules
DEFAULT_MODULE_TABLE: Final[T.Tuple[ModuleRow, ...]] = (
    ("bluetooth", 134),
    ("btusb", 12),
    ("usbhid", 12),
    ("hid_generic", 1),
    ("hid", 32),
    ("snd_hda_intel", 11),
    ("snd_hda_codec", 40),
    ("snd_pcm", 28),
    ("snd", 23),
    ("soundcore", 4),
    ("i915", 484),
    ("drm_kms_helper", 47),
    ("drm", 127),
    ("e1000e", 70),
    ("ptp", 5),
    ("pps_core", 6),
    ("nvme", 13),
    ("nvme_core", 33),
    ("ext4", 184),
    ("mbcache", 3),
    ("jbd2", 30),
    ("crc16", 2),
    ("kvm_intel", 76),
    ("kvm", 212),
    ("iwlwifi", 85),
    ("cfg80211", 199),
    ("mac80211", 222),
    ("rfkill", 8),
    ("joydev", 7),
    ("input_leds", 7),
)


class TranslationFault(str, enum.Enum):
    NOT_MAPPED = "not-mapped"
    NON_CANONICAL = "non-canonical"


NotMapped: Final = TranslationFault.NOT_MAPPED
NonCanonical: Final = TranslationFault.NON_CANONICAL


class Mapped(T.NamedTuple):
    frame: Frame
    flags: PageFlags


Translation = T.Union[Mapped, TranslationFault]


class VirtualAddress(int):
    """A 64-bit virtual address."""

    def __new__(cls, value: int) -> VirtualAddress:
        if not 0 <= value < 2**64:
            raise ValueError(f"Not a 64-bit address: {value:#x}")
        return super().__new__(cls, value)

    @property
    def vpn(self) -> Vpn:
        return self >> PAGE_SHIFT

    @property
    def page_offset(self) -> int:
        return self & PAGE_MASK

    @property
    def canonical(self) -> bool:
        return is_canonical(self)

    def __repr__(self) -> str:
        return f"VirtualAddress({int(self):#018x})"


def is_canonical(vaddr: int) -> bool:
    """Bits 63..47 must all equal bit 47."""
    top = vaddr >> 47
    return top == 0 or top == 0x1FFFF


class AddressSpace:
    """Page table of one simulated machine plus the physical memory behind it."""

    def __init__(self) -> None:
        self._pages: dict[Vpn, Mapped] = {}
        self._memory: dict[Frame, bytearray] = {}
        self._next_frame: Frame = 0x1000

    def __len__(self) -> int:
        return len(self._pages)

    def __contains__(self, vaddr: int) -> bool:
        return (vaddr >> PAGE_SHIFT) in self._pages

    def map_region(
        self,
        start: int,
        n_pages: int,
        flags: PageFlags,
        alias_of: int | None = None,
    ) -> list[Frame]:
        """
        Map ``n_pages`` pages starting at the page-aligned ``start``.

        Fresh frames are allocated unless ``alias_of`` names an already mapped region whose frames are
        shared by the new mapping.
        """
        if start & PAGE_MASK:
            raise ValueError(f"'start' must be page aligned: {start:#x}")
        if n_pages < 1:
            raise ValueError(f"'n_pages' must be positive: {n_pages}")
        end = start + n_pages * PAGE_SIZE - 1
        if not (is_canonical(start) and is_canonical(end)) or (start >> 47) != (end >> 47):
            raise ValueError(f"Region is not canonical: {start:#x}-{end:#x}")
        first_vpn = start >> PAGE_SHIFT
        vpns = range(first_vpn, first_vpn + n_pages)
        overlapping = [vpn for vpn in vpns if vpn in self._pages]
        if overlapping:
            raise ValueError(f"Region overlaps an existing mapping at {overlapping[0] << PAGE_SHIFT:#x}")
        if alias_of is None:
            frames = list(range(self._next_frame, self._next_frame + n_pages))
            self._next_frame += n_pages
        else:
            frames = []
            for vpn in range(alias_of >> PAGE_SHIFT, (alias_of >> PAGE_SHIFT) + n_pages):
                source = self._pages.get(vpn)
                if source is None:
                    raise ValueError(f"Alias source is not mapped: {vpn << PAGE_SHIFT:#x}")
                frames.append(source.frame)
        for vpn, frame in zip(vpns, frames):
            self._pages[vpn] = Mapped(frame, flags)
        logger.debug("Mapped %d pages at %#x", n_pages, start)
        return frames

    def unmap_region(self, start: int, n_pages: int) -> None:
        first_vpn = start >> PAGE_SHIFT
        for vpn in range(first_vpn, first_vpn + n_pages):
            self._pages.pop(vpn, None)

    def translate(self, vaddr: int) -> Translation:
        if not is_canonical(vaddr):
            return NonCanonical
        return self._pages.get(vaddr >> PAGE_SHIFT, NotMapped)

    def mapped_vpns(self) -> set[Vpn]:
        return set(self._pages)

    def read_frame(self, frame: Frame, offset: int, size: int) -> bytes:
        page = self._memory.get(frame)
        if page is None:
            return bytes(size)
        return bytes(page[offset : offset + size])

    def write_frame(self, frame: Frame, offset: int, data: bytes) -> None:
        page = self._memory.get(frame)
        if page is None:
            page = self._memory[frame] = bytearray(PAGE_SIZE)
        page[offset : offset + len(data)] = data

    def read_bytes(self, vaddr: int, size: int) -> bytes:
        """Read physical memory behind ``vaddr`` ignoring permissions (setup and oracles only)."""
        return b"".join(
            self.read_frame(self._frame_of(addr), addr & PAGE_MASK, length)
            for addr, length in _page_chunks(vaddr, size)
        )

    def write_bytes(self, vaddr: int, data: bytes) -> None:
        """Write physical memory behind ``vaddr`` ignoring permissions (setup only)."""
        position = 0
        for addr, length in _page_chunks(vaddr, len(data)):
            self.write_frame(self._frame_of(addr), addr & PAGE_MASK, data[position : position + length])
            position += length

    def _frame_of(self, vaddr: int) -> Frame:
        translation = self.translate(vaddr)
        if not isinstance(translation, Mapped):
            raise ValueError(f"Address is not mapped: {vaddr:#x}")
        return translation.frame


def _page_chunks(vaddr: int, size: int) -> T.Iterator[tuple[int, int]]:
    while size > 0:
        length = min(size, PAGE_SIZE - (vaddr & PAGE_MASK))
        yield vaddr, length
        vaddr += length
        size -= length


def _place(
    rng: np.random.Generator,
    sizes: T.Sequence[int],
    region_pages: int,
    start_pages: int,
    max_gap: int,
) -> list[int]:
    """Return page offsets for ``sizes`` placed in order with a random start and gaps of at least a page."""
    if any(size < 1 for size in sizes):
        raise ValueError(f"Every extent needs at least one page: {list(sizes)}")
    slack = region_pages - sum(sizes) - max(len(sizes) - 1, 0)
    if slack < 0:
        raise ModuleRegionOverflow(
            f"{len(sizes)} extents of {sum(sizes)} pages do not fit in {region_pages} pages"
        )
    cursor = int(rng.integers(0, min(start_pages, slack) + 1))
    slack -= cursor
    offsets = []
    for index, size in enumerate(sizes):
        if index:
            extra = int(rng.integers(0, min(max_gap - 1, slack) + 1))
            slack -= extra
            cursor += 1 + extra
        offsets.append(cursor)
        cursor += size
    return offsets


def generate_layout(
    seed: SeedLike,
    os_profile: OSProfile = OSProfile.LINUX,
    module_table: T.Sequence[ModuleRow] = DEFAULT_MODULE_TABLE,
    *,
    enclave_table: T.Sequence[ModuleRow] = (),
    direct_map_slots: int = DIRECT_MAP_SLOTS,
    module_region_pages: int = MODULE_REGION_PAGES,
) -> KernelLayout:
    """
    Draw a randomized kernel layout from ``seed``.

    The kernel image is placed on a 2 MiB boundary inside the KASLR range of ``os_profile`` such that the
    whole image fits in the range. On Linux the direct-physical map is placed on a 1 GiB boundary among
    ``direct_map_slots`` slots. Modules are shuffled and packed into the module region with random gaps.
    """
    rng = _resolve_rng(seed)
    os_profile = OSProfile(os_profile)
    kaslr_start, kaslr_slots = KASLR_RANGES[os_profile]
    image_slots = KERNEL_SIZE_PAGES * PAGE_SIZE // KERNEL_ALIGN
    kernel_base = kaslr_start + int(rng.integers(0, kaslr_slots - image_slots + 1)) * KERNEL_ALIGN

    direct_map_base = None
    if os_profile == OSProfile.LINUX:
        if not 1 <= direct_map_slots <= DIRECT_MAP_SLOTS:
            raise ValueError(f"'direct_map_slots' must be in [1, {DIRECT_MAP_SLOTS}]: {direct_map_slots}")
        direct_map_base = DIRECT_MAP_START + int(rng.integers(0, direct_map_slots)) * DIRECT_MAP_ALIGN

    module_region = MODULE_REGIONS[os_profile]
    order = rng.permutation(len(module_table))
    shuffled = [module_table[i] for i in order]
    offsets = _place(
        rng,
        [size for _, size in shuffled],
        region_pages=module_region_pages,
        start_pages=MODULE_START_PAGES,
        max_gap=MODULE_MAX_GAP,
    )
    modules = [
        Extent(name=name, start=module_region + offset * PAGE_SIZE, size_pages=size)
        for (name, size), offset in zip(shuffled, offsets)
    ]

    enclave_offsets = _place(
        rng,
        [size for _, size in enclave_table],
        region_pages=ENCLAVE_REGION_PAGES,
        start_pages=256,
        max_gap=MODULE_MAX_GAP,
    )
    enclaves = [
        Extent(name=name, start=ENCLAVE_REGION + offset * PAGE_SIZE, size_pages=size)
        for (name, size), offset in zip(enclave_table, enclave_offsets)
    ]

    layout = KernelLayout(
        os_profile=os_profile,
        seed=int(seed) if isinstance(seed, (int, np.integer)) else 0,
        kernel_base=kernel_base,
        kernel_size_pages=KERNEL_SIZE_PAGES,
        direct_map_base=direct_map_base,
        direct_map_pages=DIRECT_MAP_PAGES,
        module_region=module_region,
        module_extents=modules,
        enclave_extents=enclaves,
    )
    logger.debug("Generated layout: kernel at %#x, %d modules", kernel_base, len(modules))
    return layout


def build_address_space(layout: KernelLayout) -> AddressSpace:
    """Map every region of ``layout`` as supervisor pages (enclaves as protected pages)."""
    space = AddressSpace()
    space.map_region(layout.kernel_base, layout.kernel_size_pages, KERNEL_TEXT)
    if layout.direct_map_base is not None:
        space.map_region(layout.direct_map_base, layout.direct_map_pages, KERNEL_DATA)
    for extent in layout.module_extents:
        space.map_region(extent.start, extent.size_pages, KERNEL_TEXT)
    for extent in layout.enclave_extents:
        space.map_region(extent.start, extent.size_pages, ENCLAVE)
    return space
