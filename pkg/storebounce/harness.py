"""
Scenario runner: builds a simulated machine from a :class:`~storebounce.models.ScenarioConfig`, runs an
attack against it, scores the result against the ground truth and emits the trace.

Trace columns are fixed: ``scenario,seed,candidate,outcome,retry,cycles``.
"""
from __future__ import annotations

import collections
import concurrent.futures
import dataclasses
import logging
import time
import typing as T
from pathlib import Path
from typing import Final

import multifutures
import numpy as np
import pandas as pd

from . import attacks
from ._common import _confusion
from ._common import _precision_recall_f1
from ._common import _resolve_rng
from .addrspace import build_address_space
from .addrspace import DEFAULT_MODULE_TABLE
from .addrspace import ENCLAVE_REGION
from .addrspace import ENCLAVE_REGION_PAGES
from .addrspace import generate_layout
from .addrspace import MODULE_REGIONS
from .addrspace import PAGE_SHIFT
from .addrspace import PAGE_SIZE
from .addrspace import USER_DATA
from .addrspace import AddressSpace
from .config import resolve_profile
from .exceptions import ConfigError
from .models import ActivityEvent
from .models import KernelLayout
from .models import MetricsReport
from .models import MicroarchProfile
from .models import Observation
from .models import OSProfile
from .models import Scenario
from .models import ScenarioConfig
from .models import TraceFormat
from .models import TraceRow
from .models import TxScript
from .primitives import ProbeArray
from .transient import Suppression
from .transient import transient_window
from .uarch import Core
from .uarch import LoadSource

logger = logging.getLogger(__name__)

TRACE_COLUMNS: Final = ["scenario", "seed", "candidate", "outcome", "retry", "cycles"]
TSX_VICTIM_BASE: Final = 0x0000200000000000
ACTIVITY_MODULE: Final = "usbhid"
ACTIVITY_BURST: Final = (10, 20)
WTF_SCRATCH: Final = 0x0000300000000000
WTF_FAULTING: Final = 0xFFFF800000000000


@dataclasses.dataclass
class World:
    """One simulated machine: the ground truth plus the attacker's view of it."""

    profile: MicroarchProfile
    layout: KernelLayout
    space: AddressSpace
    core: Core
    probe: ProbeArray


@dataclasses.dataclass
class _Cell:
    rows: list[TraceRow] = dataclasses.field(default_factory=list)
    candidates_tested: int = 0
    simulated_cycles: int = 0
    details: dict[str, T.Any] = dataclasses.field(default_factory=dict)


def _outcome(predicted: bool, actual: bool) -> str:
    if predicted:
        return "TP" if actual else "FP"
    return "FN" if actual else "TN"


def _row(config: ScenarioConfig, candidate: str, outcome: str, retry: int, cycles: int) -> TraceRow:
    return TraceRow(
        scenario=config.scenario.value,
        seed=config.seed,
        candidate=candidate,
        outcome=outcome,
        retry=retry,
        cycles=cycles,
    )


def _observation_rows(
    config: ScenarioConfig,
    observations: T.Sequence[Observation],
    predicted: T.Callable[[Observation], bool],
    actual: T.Callable[[int], bool],
) -> list[TraceRow]:
    return [
        _row(
            config,
            f"{observation.candidate:#x}",
            _outcome(predicted(observation), actual(observation.candidate)),
            observation.tests - 1,
            observation.cycles,
        )
        for observation in observations
    ]


def _missed_rows(config: ScenarioConfig, rows: list[TraceRow], truth: T.Iterable[int]) -> list[TraceRow]:
    """Rows for ground-truth positives the search never tested."""
    tested = {row.candidate for row in rows}
    return [_row(config, f"{item:#x}", "FN", 0, 0) for item in truth if f"{item:#x}" not in tested]


def build_world(config: ScenarioConfig, run: int = 0) -> World:
    """Generate the layout of ``config.seed`` and a fresh core whose noise stream depends on ``run``."""
    profile = resolve_profile(config)
    module_table = config.module_table if config.module_table is not None else DEFAULT_MODULE_TABLE
    enclave_table = []
    if config.scenario == Scenario.ENCLAVE and config.enclave_pages:
        enclave_table = [("enclave", config.enclave_pages)]
    layout = generate_layout(
        config.seed,
        config.os_profile,
        module_table,
        enclave_table=enclave_table,
        direct_map_slots=config.direct_map_slots,
    )
    space = build_address_space(layout)
    core = Core(space, profile, seed=_resolve_rng(np.random.SeedSequence(config.seed), stream=run + 1))
    probe = ProbeArray.allocate(core)
    return World(profile=profile, layout=layout, space=space, core=core, probe=probe)


def oracle_mapped_set(layout: KernelLayout) -> set[int]:
    """Enumerate the vpns mapped by ``layout`` without going through an address space."""
    regions = [(layout.kernel_base, layout.kernel_size_pages)]
    if layout.direct_map_base is not None:
        regions.append((layout.direct_map_base, layout.direct_map_pages))
    for extent in [*layout.module_extents, *layout.enclave_extents]:
        regions.append((extent.start, extent.size_pages))
    vpns: set[int] = set()
    for start, n_pages in regions:
        vpns.update(range(start >> PAGE_SHIFT, (start >> PAGE_SHIFT) + n_pages))
    return vpns


# Scenarios


def _run_kaslr(config: ScenarioConfig, world: World) -> _Cell:
    report = attacks.break_kaslr(
        world.core,
        config.os_profile,
        retries=config.repeats or 1,
        full_scan=config.full_scan,
        probe=world.probe,
    )
    truth = world.layout.kernel_base
    rows = _observation_rows(
        config,
        report.observations,
        predicted=lambda observation: observation.candidate == report.recovered,
        actual=lambda candidate: candidate == truth,
    )
    rows += _missed_rows(config, rows, [truth])
    details = {"recovered": report.recovered, "truth": truth, "aliases": len(report.aliases)}
    return _Cell(rows, report.candidates_tested, report.simulated_cycles, details)


def _run_directmap(config: ScenarioConfig, world: World) -> _Cell:
    if config.os_profile != OSProfile.LINUX:
        msg = f"The direct-physical map scenario needs the linux profile: {config.os_profile.value}"
        raise ConfigError(msg)
    report = attacks.find_direct_map(
        world.core,
        n_candidates=config.direct_map_slots,
        retries=config.repeats or attacks.DIRECT_MAP_RETRIES,
        probe=world.probe,
    )
    truth = T.cast(int, world.layout.direct_map_base)
    rows = _observation_rows(
        config,
        report.observations,
        predicted=lambda observation: observation.bounced,
        actual=lambda candidate: candidate == truth,
    )
    rows += _missed_rows(config, rows, [truth])
    details = {"recovered": report.recovered, "truth": truth}
    return _Cell(rows, report.candidates_tested, report.simulated_cycles, details)


def _run_modules(config: ScenarioConfig, world: World) -> _Cell:
    table = config.module_table if config.module_table is not None else list(DEFAULT_MODULE_TABLE)
    repeats = config.repeats or (1 if world.profile.noise_p == 0 else attacks.MODULE_RETRIES)
    report = attacks.scan_pages(
        world.core,
        MODULE_REGIONS[config.os_profile],
        config.module_scan_pages,
        repeats=repeats,
        probe=world.probe,
    )
    extents = attacks.extents_from_pages(T.cast(T.List[int], report.recovered))
    named = attacks.classify_modules(extents, table)
    cycles_by_page = {observation.candidate: observation.cycles for observation in report.observations}

    predicted = {(extent.name, extent.start): extent for extent in named if extent.name is not None}
    size_counts = collections.Counter(size for _, size in table)
    truth = {
        (extent.name, extent.start): extent
        for extent in world.layout.module_extents
        if size_counts[extent.size_pages] == 1
    }
    rows = []
    for key in sorted(set(predicted) | set(truth), key=lambda item: item[1]):
        extent = predicted.get(key) or truth[key]
        pages = range(extent.start, extent.end, PAGE_SIZE)
        cycles = sum(cycles_by_page.get(page, 0) for page in pages)
        outcome = _outcome(key in predicted, key in truth)
        rows.append(_row(config, f"{key[0]}@{key[1]:#x}", outcome, 0, cycles))

    scanned = {observation.candidate for observation in report.observations}
    truth_pages = {vpn << PAGE_SHIFT for vpn in oracle_mapped_set(world.layout)} & scanned
    tp, fp, fn = _confusion(T.cast(T.List[int], report.recovered), truth_pages)
    details = {
        "extents": len(extents),
        "sizes": sorted(extent.size_pages for extent in extents),
        "truth_sizes": sorted(extent.size_pages for extent in world.layout.module_extents),
        "page_f1": _precision_recall_f1(tp, fp, fn)[2],
        "repeats": repeats,
    }
    return _Cell(rows, report.candidates_tested, report.simulated_cycles, details)


def _run_enclave(config: ScenarioConfig, world: World) -> _Cell:
    first_cycle = world.core.cycles
    report = attacks.scan_pages(
        world.core,
        ENCLAVE_REGION,
        ENCLAVE_REGION_PAGES,
        repeats=config.repeats or 1,
        probe=world.probe,
    )
    truth = {
        page
        for extent in world.layout.enclave_extents
        for page in range(extent.start, extent.end, PAGE_SIZE)
    }
    rows = _observation_rows(
        config,
        report.observations,
        predicted=lambda observation: observation.bounced,
        actual=lambda candidate: candidate in truth,
    )
    details = {"detected": len(T.cast(T.List[int], report.recovered)), "truth": len(truth)}
    return _Cell(rows, report.candidates_tested, world.core.cycles - first_cycle, details)


def _run_tsx(config: ScenarioConfig, world: World) -> _Cell:
    core = world.core
    candidates = [TSX_VICTIM_BASE + page * PAGE_SIZE for page in range(config.tsx_pages)]
    if candidates:
        world.space.map_region(TSX_VICTIM_BASE, len(candidates), USER_DATA)
    victim = TxScript(pages=candidates, abort_after=config.tsx_abort_after, write=True)
    first_cycle = core.cycles
    before = world.space.read_bytes(TSX_VICTIM_BASE, len(candidates) * PAGE_SIZE) if candidates else b""
    hits = attacks.tsx_atomicity_probe(core, victim, candidates, probe=world.probe)
    after = world.space.read_bytes(TSX_VICTIM_BASE, len(candidates) * PAGE_SIZE) if candidates else b""
    truth = {page >> PAGE_SHIFT for page in victim.touched}
    rows = []
    for candidate in candidates:
        vpn = candidate >> PAGE_SHIFT
        rows.append(_row(config, f"{candidate:#x}", _outcome(vpn in hits, vpn in truth), 0, 0))
    details = {"touched": len(truth), "detected": len(hits), "memory_rolled_back": before == after}
    return _Cell(rows, len(candidates), core.cycles - first_cycle, details)


def default_event_script(periods: int, module: str = ACTIVITY_MODULE) -> list[ActivityEvent]:
    """A mouse-like burst touching the first page of ``module`` during periods 10 to 20."""
    first, last = ACTIVITY_BURST
    last = min(last, periods - 1)
    return [ActivityEvent(period=period, module=module) for period in range(first, last + 1)]


def _run_monitor(config: ScenarioConfig, world: World) -> _Cell:
    script = config.event_script
    if script is None:
        script = default_event_script(config.periods)
    extents = {extent.name: extent for extent in world.layout.module_extents}
    module_pages = {
        T.cast(str, name): [extent.start + page * PAGE_SIZE for page in range(extent.size_pages)]
        for name, extent in extents.items()
    }
    activity_rng = _resolve_rng(np.random.SeedSequence(config.seed), stream=0)
    activity = attacks.KernelActivity(script, module_pages, activity_rng)
    targets = sorted({module_pages[event.module][0] for event in script})
    if not targets:
        fallback = module_pages.get(ACTIVITY_MODULE) or next(iter(module_pages.values()))
        targets = [fallback[0]]
    reference = world.layout.kernel_base + (world.layout.kernel_size_pages - 1) * PAGE_SIZE
    sibling = world.core.sibling(seed=_resolve_rng(np.random.SeedSequence(config.seed), stream=1000))
    first_cycle = world.core.cycles + sibling.cycles
    trace = attacks.monitor_activity(
        (world.core, sibling),
        targets,
        reference,
        config.periods,
        config.samples_per_period,
        activity,
        lower_bound=config.lower_bound,
        probe=world.probe,
    )
    active = {event.period for event in script if event.rate > 0}
    rows = [
        _row(config, f"period-{index}", _outcome(period.detected, index in active), 0, period.hits_target)
        for index, period in enumerate(trace.periods)
    ]
    details = {
        "detected_periods": trace.detected_periods,
        "hits_target": [period.hits_target for period in trace.periods],
        "hits_reference": [period.hits_reference for period in trace.periods],
    }
    cycles = world.core.cycles + sibling.cycles - first_cycle
    return _Cell(rows, config.periods * config.samples_per_period, cycles, details)


def _run_spectre_leak(config: ScenarioConfig, world: World) -> _Cell:
    secret = config.secret.encode()
    gadget = attacks.plant_spectre_gadget(world.space, secret)
    core = world.core
    first_cycle = core.cycles
    rows = []
    leaked = bytearray()
    erasures: list[int] = []
    for position in range(len(secret)):
        start = core.cycles
        index = gadget.bounds + position
        result = attacks.spectre_leak(
            core,
            gadget,
            [index],
            repeats=config.repeats or attacks.SPECTRE_REPEATS,
            probe=world.probe,
        )
        leaked += result.data
        if result.erasures:
            erasures.append(position)
            outcome = "FN"
        else:
            outcome = "TP" if result.data == secret[position : position + 1] else "FP"
        rows.append(_row(config, f"{gadget.data_base + index:#x}", outcome, 0, core.cycles - start))
    details = {
        "secret": config.secret,
        "leaked": leaked.decode(errors="replace"),
        "erasures": erasures,
    }
    return _Cell(rows, len(secret), core.cycles - first_cycle, details)


_SCENARIOS: Final[dict[Scenario, T.Callable[[ScenarioConfig, World], _Cell]]] = {
    Scenario.KASLR: _run_kaslr,
    Scenario.DIRECTMAP: _run_directmap,
    Scenario.MODULES: _run_modules,
    Scenario.ENCLAVE: _run_enclave,
    Scenario.TSX: _run_tsx,
    Scenario.MONITOR: _run_monitor,
    Scenario.SPECTRE_LEAK: _run_spectre_leak,
}


def score_rows(rows: T.Iterable[TraceRow]) -> tuple[float, float, float]:
    """Precision, recall and F1 recomputed from the outcome column of trace rows."""
    outcomes = [row.outcome for row in rows]
    return _precision_recall_f1(outcomes.count("TP"), outcomes.count("FP"), outcomes.count("FN"))


def run_scenario(config: ScenarioConfig) -> MetricsReport:
    """Run ``config.runs`` independent runs of the scenario on the layout of ``config.seed``."""
    if not isinstance(config, ScenarioConfig):
        raise ConfigError(f"Expected a ScenarioConfig, not: {type(config).__name__}")
    if config.scenario == Scenario.SWEEP:
        return sweep(config)
    runner = _SCENARIOS.get(config.scenario)
    if runner is None:  # pragma: no cover
        raise ConfigError(f"Unknown scenario: {config.scenario}")
    logger.info("Starting scenario %s: seed=%d, runs=%d", config.scenario.value, config.seed, config.runs)
    started = time.perf_counter()
    rows: list[TraceRow] = []
    details = []
    candidates = cycles = 0
    for run in range(config.runs):
        cell = runner(config, build_world(config, run=run))
        rows += cell.rows
        candidates += cell.candidates_tested
        cycles += cell.simulated_cycles
        details.append({"run": run, "seed": config.seed, **cell.details})
    precision, recall, f1 = score_rows(rows)
    report = MetricsReport(
        scenario=config.scenario.value,
        seed=config.seed,
        precision=precision,
        recall=recall,
        f1=f1,
        candidates_tested=candidates,
        simulated_cycles=cycles,
        wall_seconds=time.perf_counter() - started,
        rows=rows,
        details=details,
    )
    logger.info("Finished scenario %s: f1=%.4f", config.scenario.value, f1)
    return report


def _sweep_cell(config: ScenarioConfig) -> MetricsReport:
    return run_scenario(config)


def sweep(config: ScenarioConfig) -> MetricsReport:
    """Run ``config.sweep_scenario`` for ``sweep_seeds`` consecutive seeds on a process pool."""
    cells = [
        config.model_copy(update={"scenario": config.sweep_scenario, "seed": config.seed + offset})
        for offset in range(config.sweep_seeds)
    ]
    started = time.perf_counter()
    executor = None
    if config.n_workers is not None:
        executor = concurrent.futures.ProcessPoolExecutor(max_workers=config.n_workers)
    results = multifutures.multiprocess(
        _sweep_cell,
        func_kwargs=[{"config": cell} for cell in cells],
        check=False,
        executor=executor,
        progress_bar=False,
    )
    multifutures.check_results(results)
    reports: list[MetricsReport] = sorted(
        (result.result for result in results), key=lambda report: report.seed
    )
    rows = [row for report in reports for row in report.rows]
    precision, recall, f1 = score_rows(rows)
    details = [
        {
            "seed": report.seed,
            "f1": report.f1,
            "precision": report.precision,
            "recall": report.recall,
            "candidates_tested": report.candidates_tested,
            "simulated_cycles": report.simulated_cycles,
        }
        for report in reports
    ]
    summary = MetricsReport(
        scenario=Scenario.SWEEP.value,
        seed=config.seed,
        precision=precision,
        recall=recall,
        f1=f1,
        candidates_tested=sum(report.candidates_tested for report in reports),
        simulated_cycles=sum(report.simulated_cycles for report in reports),
        wall_seconds=time.perf_counter() - started,
        rows=rows,
        details=details,
    )
    logger.info("Sweep: mean f1 over %d seeds: %.4f", len(reports), mean_f1(summary))
    return summary


def mean_f1(report: MetricsReport) -> float:
    """Mean of the per-seed F1 scores of a sweep."""
    return float(np.mean([detail["f1"] for detail in report.details]))


# Traces


def trace_frame(report: MetricsReport) -> pd.DataFrame:
    df = pd.DataFrame([row.model_dump() for row in report.rows], columns=TRACE_COLUMNS)
    return df.astype({"seed": "int64", "retry": "int64", "cycles": "int64"})


def emit_trace(report: MetricsReport, format: TraceFormat, path: Path) -> Path:
    """Write the trace rows of ``report`` to ``path``; CSV rows are terminated by ``\\n``."""
    df = trace_frame(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if TraceFormat(format) == TraceFormat.CSV:
        df.to_csv(path, index=False, lineterminator="\n")
    else:
        df.to_json(path, orient="records", lines=True)
    logger.info("Wrote %d trace rows to %s", len(df), path)
    return path


# Root-cause battery


def wtf_battery(
    profile: MicroarchProfile,
    sizes: T.Sequence[int] = (1, 2, 4, 8, 16, 32),
    offsets: T.Sequence[int] = (0, 8, 64, 100),
    span: int = 40,
) -> pd.DataFrame:
    """
    Store to a user page, then issue a faulting load on another page at nearby page offsets.

    Returns one row per ``(store_size, store_offset, load_offset)`` with the load's source. Forwarding to
    a faulting load on a different page is the write-transient effect; it must only appear for load
    offsets inside ``[store_offset, store_offset + store_size)``.
    """
    records = []
    for size in sizes:
        for store_offset in offsets:
            for load_offset in range(max(0, store_offset - 8), min(PAGE_SIZE, store_offset + span)):
                space = AddressSpace()
                space.map_region(WTF_SCRATCH, 1, USER_DATA)
                core = Core(space, profile, seed=0)
                core.store_issue(WTF_SCRATCH + store_offset, bytes(range(1, size + 1)))
                with transient_window(core, Suppression.TSX_LIKE):
                    result = core.load_issue(WTF_FAULTING + load_offset, 1)
                records.append(
                    {
                        "store_size": size,
                        "store_offset": store_offset,
                        "load_offset": load_offset,
                        "source": result.source.value,
                        "value": result.value[0],
                    }
                )
    df = pd.DataFrame.from_records(records)
    df["wt_forward"] = df["source"] == LoadSource.WT_FORWARD.value
    return df
