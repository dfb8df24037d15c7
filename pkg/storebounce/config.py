from __future__ import annotations

import functools
import json
import logging
import os
import typing as T
from pathlib import Path

import pydantic

from .exceptions import ConfigError
from .models import MicroarchProfile
from .models import ScenarioConfig

logger = logging.getLogger(__name__)

PROFILE_DIR_ENV = "STOREBOUNCE_PROFILE_DIR"
BUILTIN_PROFILE_DIR = Path(__file__).parent / "profiles"


def available_profiles() -> list[str]:
    return sorted(path.stem for path in BUILTIN_PROFILE_DIR.glob("*.json"))


def _resolve_profile_path(name_or_path: str | os.PathLike[str]) -> Path:
    candidate = Path(name_or_path)
    if candidate.suffix == ".json" and candidate.is_file():
        return candidate
    search_path = []
    if os.environ.get(PROFILE_DIR_ENV):
        search_path.append(Path(os.environ[PROFILE_DIR_ENV]))
    search_path.append(BUILTIN_PROFILE_DIR)
    for directory in search_path:
        path = directory / f"{name_or_path}.json"
        if path.is_file():
            return path
    msg = f"Unknown profile {str(name_or_path)!r}; available: {available_profiles()}"
    raise ConfigError(msg)


@functools.lru_cache
def _load_profile_file(path: Path) -> MicroarchProfile:
    logger.debug("Loading profile: %s", path)
    try:
        return MicroarchProfile.model_validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, pydantic.ValidationError) as exc:
        raise ConfigError(f"Invalid profile {path}: {exc}") from exc


def load_profile(name_or_path: str | os.PathLike[str] = "skylake") -> MicroarchProfile:
    """
    Return a :class:`MicroarchProfile` by file path or by name.

    Names are looked up in ``$STOREBOUNCE_PROFILE_DIR`` first and in the built-in profiles second.
    """
    return _load_profile_file(_resolve_profile_path(name_or_path))


def resolve_profile(config: ScenarioConfig) -> MicroarchProfile:
    """Load the profile of ``config`` and apply its overrides."""
    profile = load_profile(config.profile)
    overrides: dict[str, T.Any] = {}
    if config.noise_p is not None:
        overrides["noise_p"] = config.noise_p
    if config.mispredict_success_p is not None:
        overrides["mispredict_success_p"] = config.mispredict_success_p
    if overrides:
        profile = profile.model_copy(update=overrides)
    return profile


def make_config(**kwargs: T.Any) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig`, turning validation errors into :class:`ConfigError`."""
    try:
        return ScenarioConfig(**kwargs)
    except pydantic.ValidationError as exc:
        raise ConfigError(str(exc)) from exc
