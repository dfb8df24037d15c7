"""
Command line interface: ``storebounce <scenario> [options]``.

Exit codes: ``0`` on success, ``2`` on configuration errors, ``3`` when a scenario fails.
"""
from __future__ import annotations

import argparse
import logging
import sys
import typing as T
from pathlib import Path

import pydantic

from .config import available_profiles
from .config import make_config
from .exceptions import ConfigError
from .exceptions import StoreBounceError
from .harness import emit_trace
from .harness import run_scenario
from .models import EventScript
from .models import OSProfile
from .models import Scenario
from .models import ScenarioConfig
from .models import TraceFormat

logger = logging.getLogger(__name__)

EXIT_OK: T.Final = 0
EXIT_CONFIG: T.Final = 2
EXIT_SCENARIO: T.Final = 3

_LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--profile",
        default="skylake",
        help=f"Profile name or JSON file (built-in: {', '.join(available_profiles())})",
    )
    common.add_argument("--seed", type=int, default=0, help="Layout seed")
    common.add_argument("--noise", type=float, default=None, help="Override the profile's noise_p")
    common.add_argument("--repeats", type=int, default=None, help="Attack-level repetitions")
    common.add_argument("--runs", type=int, default=1, help="Independent runs on the same layout")
    common.add_argument("--os", dest="os_profile", choices=[o.value for o in OSProfile], default="linux")
    common.add_argument("--out", type=Path, default=None, help="Write the trace rows to this file")
    common.add_argument("--format", choices=[f.value for f in TraceFormat], default="csv")
    common.add_argument("--verbose", "-v", action="count", default=0, help="Increase verbosity")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storebounce",
        description="Store-to-load forwarding attacks against a simulated CPU",
    )
    subparsers = parser.add_subparsers(dest="scenario", required=True, metavar="SCENARIO")
    common = _common_parser()

    kaslr = subparsers.add_parser("kaslr", parents=[common], help="Break KASLR")
    kaslr.add_argument("--full-scan", action="store_true", help="Keep scanning after the first hit")
    directmap = subparsers.add_parser("directmap", parents=[common], help="Find the direct-physical map")
    directmap.add_argument("--slots", dest="direct_map_slots", type=int, default=2**16)
    modules = subparsers.add_parser("modules", parents=[common], help="Find and name kernel modules")
    modules.add_argument("--scan-pages", dest="module_scan_pages", type=int, default=8192)
    enclave = subparsers.add_parser("enclave", parents=[common], help="Detect enclave pages")
    enclave.add_argument("--enclave-pages", type=int, default=16)
    tsx = subparsers.add_parser("tsx", parents=[common], help="Find the pages of an aborted transaction")
    tsx.add_argument("--pages", dest="tsx_pages", type=int, default=10)
    tsx.add_argument("--abort-after", dest="tsx_abort_after", type=int, default=4)
    monitor = subparsers.add_parser("monitor", parents=[common], help="Monitor kernel module activity")
    monitor.add_argument("--periods", type=int, default=30)
    monitor.add_argument("--samples", dest="samples_per_period", type=int, default=5000)
    monitor.add_argument("--lower-bound", type=int, default=5)
    monitor.add_argument("--event-script", type=Path, default=None, help="JSON list of activity events")
    spectre = subparsers.add_parser("spectre-leak", parents=[common], help="Leak a kernel secret")
    spectre.add_argument("--secret", default="SECRET")
    spectre.add_argument("--mispredict", dest="mispredict_success_p", type=float, default=None)
    sweep = subparsers.add_parser("sweep", parents=[common], help="Run a scenario over consecutive seeds")
    sweep.add_argument(
        "--scenario",
        dest="sweep_scenario",
        choices=[s.value for s in Scenario if s != Scenario.SWEEP],
        default=Scenario.KASLR.value,
    )
    sweep.add_argument("--seeds", dest="sweep_seeds", type=int, default=10)
    sweep.add_argument("--workers", dest="n_workers", type=int, default=None)
    return parser


def _load_event_script(path: Path) -> list[T.Any]:
    try:
        return EventScript.validate_json(path.read_bytes())
    except (OSError, pydantic.ValidationError) as exc:
        raise ConfigError(f"Invalid event script {path}: {exc}") from exc


def config_from_args(args: argparse.Namespace) -> ScenarioConfig:
    """Turn the parsed arguments into a validated :class:`ScenarioConfig`."""
    kwargs = {
        key: value
        for key, value in vars(args).items()
        if key not in {"verbose", "noise", "event_script"} and value is not None
    }
    kwargs["noise_p"] = args.noise
    if getattr(args, "event_script", None) is not None:
        kwargs["event_script"] = _load_event_script(args.event_script)
    return make_config(**kwargs)


def main(argv: T.Optional[T.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=_LOG_LEVELS[min(args.verbose, len(_LOG_LEVELS) - 1)],
        format="%(asctime)s %(levelname)-8s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
        report = run_scenario(config)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except StoreBounceError as exc:
        logger.error("Scenario %s failed: %s", args.scenario, exc)
        return EXIT_SCENARIO
    if config.out is not None:
        emit_trace(report, config.format, config.out)
    print(report.model_dump_json(exclude={"rows"}, indent=2))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
