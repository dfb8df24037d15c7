from __future__ import annotations


class StoreBounceError(Exception):
    """Root of every error raised by ``storebounce``."""


class ModuleRegionOverflow(StoreBounceError):
    """The module table does not fit in the module region."""


class StallError(StoreBounceError):
    """The store buffer is full and the frontend stalls."""


class ArchitecturalFault(StoreBounceError):
    """A faulting access happened outside of any transient window."""

    def __init__(self, vaddr: int, reason: str) -> None:
        self.vaddr = vaddr
        self.reason = reason
        super().__init__(f"{reason} at {vaddr:#018x}")


class WindowStateError(StoreBounceError):
    """Transient windows do not nest."""


class TxStateError(StoreBounceError):
    """A transaction was begun, committed or aborted out of order."""


class NoHit(StoreBounceError):
    """No TLB probe page was classified as a TLB hit."""


class AmbiguousHit(StoreBounceError):
    """More than one TLB probe page was classified as a TLB hit."""

    def __init__(self, hits: list[int]) -> None:
        self.hits = hits
        super().__init__(f"Ambiguous TLB hits: {hits}")


class NotFound(StoreBounceError):
    """A search scanned every candidate without a single bounce."""


class ConfigError(StoreBounceError, ValueError):
    """Invalid scenario configuration or profile."""
