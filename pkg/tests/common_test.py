from __future__ import annotations

import numpy as np
import pytest
import tenacity

from storebounce._common import _ambiguity_retrying
from storebounce._common import _confusion
from storebounce._common import _precision_recall_f1
from storebounce._common import _resolve_rng
from storebounce.exceptions import AmbiguousHit
from storebounce.exceptions import NoHit


def test_resolve_rng_returns_generator_as_is():
    rng = np.random.default_rng(1)
    assert _resolve_rng(rng) is rng


def test_resolve_rng_is_deterministic():
    assert _resolve_rng(7).random() == _resolve_rng(7).random()
    assert _resolve_rng(7, stream=1).random() != _resolve_rng(7, stream=2).random()


def test_resolve_rng_seed_sequence_streams():
    first = _resolve_rng(np.random.SeedSequence(3), stream=1).integers(0, 2**32, 4)
    second = _resolve_rng(np.random.SeedSequence(3), stream=1).integers(0, 2**32, 4)
    other = _resolve_rng(np.random.SeedSequence(3), stream=2).integers(0, 2**32, 4)
    assert list(first) == list(second)
    assert list(first) != list(other)


@pytest.mark.parametrize(
    "tp,fp,fn,expected",
    [
        (1, 0, 0, (1.0, 1.0, 1.0)),
        (0, 0, 0, (1.0, 1.0, 1.0)),
        (0, 1, 1, (0.0, 0.0, 0.0)),
        (1, 1, 0, (0.5, 1.0, 2 / 3)),
        (3, 1, 2, (0.75, 0.6, 2 * 0.75 * 0.6 / 1.35)),
    ],
)
def test_precision_recall_f1(tp, fp, fn, expected):
    assert _precision_recall_f1(tp, fp, fn) == pytest.approx(expected)


def test_confusion():
    assert _confusion([1, 2, 3], [2, 3, 4, 5]) == (2, 1, 2)


def test_ambiguity_retrying_retries_ambiguous_hits_only():
    calls = []

    def measure():
        calls.append(1)
        if len(calls) < 3:
            raise AmbiguousHit([1, 2])
        return 42

    for attempt in _ambiguity_retrying(3):
        with attempt:
            value = measure()
    assert value == 42
    assert len(calls) == 3


def test_ambiguity_retrying_reraises():
    with pytest.raises(AmbiguousHit):
        for attempt in _ambiguity_retrying(2):
            with attempt:
                raise AmbiguousHit([3, 4])


def test_ambiguity_retrying_does_not_retry_no_hit():
    calls = []
    with pytest.raises(NoHit):
        for attempt in _ambiguity_retrying(5):
            with attempt:
                calls.append(1)
                raise NoHit("nothing")
    assert len(calls) == 1


def test_ambiguity_retrying_is_a_tenacity_retrying():
    assert isinstance(_ambiguity_retrying(1), tenacity.Retrying)


def test_ambiguity_retrying_logs_the_exception(caplog):
    with pytest.raises(AmbiguousHit):
        for attempt in _ambiguity_retrying(2):
            with attempt:
                raise AmbiguousHit([3, 4])
    assert "Re-measuring after attempt 1 ended with AmbiguousHit: Ambiguous TLB hits: [3, 4]" in caplog.text
    assert "None" not in caplog.text
