from __future__ import annotations

import pydantic
import pytest

from storebounce import models


def test_metrics_report_f1_must_match():
    with pytest.raises(pydantic.ValidationError):
        models.MetricsReport(
            scenario="kaslr",
            seed=0,
            precision=1.0,
            recall=0.5,
            f1=0.9,
            candidates_tested=1,
            simulated_cycles=1,
        )
    report = models.MetricsReport(
        scenario="kaslr",
        seed=0,
        precision=1.0,
        recall=0.5,
        f1=2 / 3,
        candidates_tested=1,
        simulated_cycles=1,
    )
    assert report.f1 == pytest.approx(2 / 3)


def test_protected_pages_must_be_present():
    with pytest.raises(pydantic.ValidationError):
        models.PageFlags(present=False, protected_region=True)


def test_tx_script_touched():
    script = models.TxScript(pages=[1, 2, 3], abort_after=2)
    assert script.touched == [1, 2]
    assert models.TxScript(pages=[1, 2, 3]).touched == [1, 2, 3]


def test_event_script_from_json():
    events = models.EventScript.validate_json('[{"period": 3, "module": "usbhid", "rate": 0.5}]')
    assert events == [models.ActivityEvent(period=3, module="usbhid", rate=0.5)]


def test_activity_trace_detected_periods():
    trace = models.ActivityTrace(
        lower_bound=5,
        periods=[
            models.ActivityPeriod(hits_target=0, hits_reference=0, detected=False),
            models.ActivityPeriod(hits_target=9, hits_reference=0, detected=True),
        ],
    )
    assert trace.detected_periods == [1]


def test_extent_end():
    assert models.Extent(start=0x1000, size_pages=2).end == 0x3000
