from __future__ import annotations

import logging
import typing as T

import numpy as np
import tenacity

from .custom_types import SeedLike
from .exceptions import AmbiguousHit

logger = logging.getLogger(__name__)


def _resolve_rng(seed: SeedLike | np.random.Generator, stream: int = 0) -> np.random.Generator:
    """Return an independent generator for ``stream`` derived from ``seed``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed.spawn(stream + 1)[stream])
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng([seed, stream])


def _precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # An empty ground truth that is also predicted empty is a perfect score
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    total = precision + recall
    f1 = 2 * precision * recall / total if total else 0.0
    return precision, recall, f1


def _confusion(predicted: T.Iterable[T.Hashable], truth: T.Iterable[T.Hashable]) -> tuple[int, int, int]:
    predicted_set = set(predicted)
    truth_set = set(truth)
    tp = len(predicted_set & truth_set)
    fp = len(predicted_set - truth_set)
    fn = len(truth_set - predicted_set)
    return tp, fp, fn


def _before_sleep(retry_state: T.Any) -> None:
    exc = retry_state.outcome.exception() if retry_state.outcome is not None else None
    logger.warning(
        "Re-measuring after attempt %s ended with %s: %s",
        retry_state.attempt_number,
        type(exc).__name__,
        exc,
    )


def _ambiguity_retrying(max_attempts: int) -> tenacity.Retrying:
    """Retry a TLB probe sweep that classified more than one page as a hit."""
    return tenacity.Retrying(
        stop=tenacity.stop_after_attempt(max_attempts),
        retry=tenacity.retry_if_exception_type(AmbiguousHit),
        before_sleep=_before_sleep,
        reraise=True,
    )
