import enum
import logging
import math
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Final
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import pydantic

logger = logging.getLogger(__name__)


class OSProfile(str, enum.Enum):
    LINUX: Final = "linux"
    WINDOWS: Final = "windows"


class Scenario(str, enum.Enum):
    KASLR: Final = "kaslr"
    DIRECTMAP: Final = "directmap"
    MODULES: Final = "modules"
    ENCLAVE: Final = "enclave"
    TSX: Final = "tsx"
    MONITOR: Final = "monitor"
    SPECTRE_LEAK: Final = "spectre-leak"
    SWEEP: Final = "sweep"


class TraceFormat(str, enum.Enum):
    CSV: Final = "csv"
    JSON: Final = "json"


class MicroarchProfile(pydantic.BaseModel):
    """Per-CPU switches of the simulator."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    name: str
    description: str = ""
    store_buffer_capacity: int = pydantic.Field(default=56, ge=1)
    wtf_enabled: bool = True
    dtlb_geometry: Tuple[int, int] = (16, 4)
    itlb_geometry: Tuple[int, int] = (8, 8)
    cache_lines: int = pydantic.Field(default=1024, ge=1)
    lat_cache_hit: int = pydantic.Field(default=40, ge=0)
    lat_cache_miss: int = pydantic.Field(default=300, ge=0)
    lat_walk: int = pydantic.Field(default=100, ge=0)
    hit_threshold: int = pydantic.Field(default=150, ge=1)
    noise_p: float = pydantic.Field(default=0.0, ge=0, lt=1)
    mispredict_success_p: float = pydantic.Field(default=1.0, ge=0, le=1)
    tsx_overhead: int = pydantic.Field(default=560, ge=0)
    signal_overhead: int = pydantic.Field(default=2300, ge=0)

    @pydantic.field_validator("dtlb_geometry", "itlb_geometry")
    @classmethod
    def _check_geometry(cls, geometry: Tuple[int, int]) -> Tuple[int, int]:
        sets, ways = geometry
        if sets < 1 or ways < 1:
            raise ValueError(f"TLB geometry must have at least one set and one way: {geometry}")
        return geometry

    @pydantic.model_validator(mode="after")
    def _check_latencies(self) -> "MicroarchProfile":
        if self.lat_cache_miss <= self.lat_cache_hit:
            msg = f"lat_cache_miss must exceed lat_cache_hit: {self.lat_cache_miss} vs {self.lat_cache_hit}"
            raise ValueError(msg)
        return self


class PageFlags(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    present: bool = True
    user_accessible: bool = False
    writable: bool = True
    # Enclave (EPC) pages: backed by a frame but inaccessible from outside the enclave
    protected_region: bool = False

    @pydantic.model_validator(mode="after")
    def _protected_implies_present(self) -> "PageFlags":
        if self.protected_region and not self.present:
            raise ValueError("A protected page must be present")
        return self


class Extent(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    name: Optional[str] = None
    start: int = pydantic.Field(ge=0, lt=2**64)
    size_pages: int = pydantic.Field(ge=1)

    @property
    def end(self) -> int:
        return self.start + self.size_pages * 4096


class KernelLayout(pydantic.BaseModel):
    """Randomized placement of the kernel, the direct-physical map, the modules and the enclaves."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    os_profile: OSProfile
    seed: int
    kernel_base: int
    kernel_size_pages: int = 4096
    direct_map_base: Optional[int] = None
    direct_map_pages: int = 64
    module_region: int
    module_extents: List[Extent] = []
    enclave_extents: List[Extent] = []

    def dump(self) -> Dict[str, Any]:
        """Return the ground-truth document used by the test oracles."""
        return {
            "kernel_base": self.kernel_base,
            "direct_map_base": self.direct_map_base,
            "modules": [
                {"name": extent.name, "start": extent.start, "size": extent.size_pages}
                for extent in self.module_extents
            ],
            "enclaves": [
                {"name": extent.name, "start": extent.start, "size": extent.size_pages}
                for extent in self.enclave_extents
            ],
        }


class ActivityEvent(pydantic.BaseModel):
    """One entry of a kernel activity script: during ``period`` the kernel touches ``pages_touched``
    pages of ``module``; each sample sees the touch with probability ``rate``."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    period: int = pydantic.Field(ge=0)
    module: str
    pages_touched: int = pydantic.Field(default=1, ge=1)
    rate: float = pydantic.Field(default=1.0, ge=0, le=1)


EventScript = pydantic.TypeAdapter(List[ActivityEvent])


class ActivityPeriod(pydantic.BaseModel):
    hits_target: int
    hits_reference: int
    detected: bool


class ActivityTrace(pydantic.BaseModel):
    lower_bound: int
    periods: List[ActivityPeriod] = []

    @property
    def detected_periods(self) -> List[int]:
        return [index for index, period in enumerate(self.periods) if period.detected]


class SpectreGadget(pydantic.BaseModel):
    """``if (index < bounds) y = oracle[data[index] * 4096];`` living in the kernel."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    site: str = "gadget"
    data_base: int
    bounds: int = pydantic.Field(ge=1)
    oracle_base: int


class TxScript(pydantic.BaseModel):
    """A victim transaction touching ``pages`` in order and aborting after ``abort_after`` of them."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    pages: List[int] = []
    abort_after: Optional[int] = pydantic.Field(default=None, ge=0)
    write: bool = False

    @property
    def touched(self) -> List[int]:
        if self.abort_after is None:
            return list(self.pages)
        return list(self.pages[: self.abort_after])


class Observation(pydantic.BaseModel):
    candidate: int
    bounced: bool
    tests: int
    cycles: int


class SearchReport(pydantic.BaseModel):
    recovered: Union[int, List[int], None] = None
    candidates_tested: int = 0
    retries_per_candidate: int = 1
    simulated_cycles: int = 0
    aliases: List[int] = []
    observations: List[Observation] = []
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = pydantic.Field(default=None, ge=0, le=1)


class LeakResult(pydantic.BaseModel):
    """Leaked bytes; erased positions hold ``0x00`` in ``data`` and are listed in ``erasures``."""

    data: bytes = b""
    erasures: List[int] = []

    @property
    def complete(self) -> bool:
        return not self.erasures


class TraceRow(pydantic.BaseModel):
    scenario: str
    seed: int
    candidate: str
    outcome: str
    retry: int
    cycles: int


class ScenarioConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")

    scenario: Scenario
    profile: str = "skylake"
    seed: int = pydantic.Field(default=0, ge=0, lt=2**64)
    noise_p: Optional[float] = pydantic.Field(default=None, ge=0, lt=1)
    mispredict_success_p: Optional[float] = pydantic.Field(default=None, ge=0, le=1)
    repeats: Optional[int] = pydantic.Field(default=None, ge=1)
    runs: int = pydantic.Field(default=1, ge=1)
    full_scan: bool = False
    os_profile: OSProfile = OSProfile.LINUX
    module_table: Optional[List[Tuple[str, int]]] = None
    module_scan_pages: int = pydantic.Field(default=8192, ge=1)
    direct_map_slots: int = pydantic.Field(default=2**16, ge=1, le=2**16)
    enclave_pages: int = pydantic.Field(default=16, ge=0)
    tsx_pages: int = pydantic.Field(default=10, ge=0, le=16)
    tsx_abort_after: Optional[int] = pydantic.Field(default=4, ge=0)
    secret: str = "SECRET"
    periods: int = pydantic.Field(default=30, ge=1)
    samples_per_period: int = pydantic.Field(default=5000, ge=1)
    lower_bound: int = pydantic.Field(default=5, ge=0)
    event_script: Optional[List[ActivityEvent]] = None
    sweep_scenario: Scenario = Scenario.KASLR
    sweep_seeds: int = pydantic.Field(default=10, ge=1)
    n_workers: Optional[int] = pydantic.Field(default=None, ge=1)
    out: Optional[Path] = None
    format: TraceFormat = TraceFormat.CSV

    @pydantic.model_validator(mode="after")
    def _check_sweep(self) -> "ScenarioConfig":
        if self.sweep_scenario == Scenario.SWEEP:
            raise ValueError("A sweep cannot sweep over sweeps")
        return self


class MetricsReport(pydantic.BaseModel):
    scenario: str
    seed: int
    precision: float
    recall: float
    f1: float
    candidates_tested: int
    simulated_cycles: int
    wall_seconds: float = 0.0
    rows: List[TraceRow] = []
    details: List[Dict[str, Any]] = []

    @pydantic.model_validator(mode="after")
    def _check_f1(self) -> "MetricsReport":
        total = self.precision + self.recall
        expected = 0.0 if total == 0 else 2 * self.precision * self.recall / total
        if not math.isclose(self.f1, expected, abs_tol=1e-9):
            raise ValueError(f"f1 is inconsistent with precision/recall: {self.f1} vs {expected}")
        return self
