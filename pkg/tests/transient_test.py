from __future__ import annotations

import unittest.mock

import numpy as np
import pytest

from storebounce.addrspace import PAGE_SHIFT
from storebounce.exceptions import ArchitecturalFault
from storebounce.exceptions import TxStateError
from storebounce.transient import predictor_for
from storebounce.transient import speculate
from storebounce.transient import SpeculationOutcome
from storebounce.transient import Suppression
from storebounce.transient import train
from storebounce.transient import tx_abort
from storebounce.transient import tx_begin
from storebounce.transient import tx_commit
from storebounce.transient import TxStatus
from storebounce.transient import with_window
from storebounce.uarch import AccessKind
from storebounce.uarch import Core
from storebounce.uarch import LoadSource

from .conftest import KERNEL_PAGE
from .conftest import UNMAPPED_PAGE
from .conftest import USER_PAGE


def test_with_window_suppresses_faults(core):
    result = with_window(core, Suppression.SIGNAL_LIKE, lambda: core.load_issue(KERNEL_PAGE, 1))
    assert result.faulted
    assert core.window is None
    with pytest.raises(ArchitecturalFault):
        core.load_issue(KERNEL_PAGE, 1)


def test_with_window_closes_on_exception(core):
    def body():
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        with_window(core, Suppression.TSX_LIKE, body)
    assert core.window is None


def test_speculative_window_has_no_overhead(core):
    start = core.cycles
    with_window(core, Suppression.SPECULATIVE, lambda: None)
    assert core.cycles == start


@pytest.mark.parametrize(
    "outcomes,expected",
    [
        ([], False),
        ([True], False),
        ([True, True], True),
        ([True, True, True, True, False], True),
        ([True, True, True, False, False], False),
    ],
)
def test_two_bit_counter(core, outcomes, expected):
    predictor = predictor_for(core)
    for taken in outcomes:
        train(predictor, "site", taken)
    assert predictor.predict("site") is expected


def test_predictor_matches_saturating_counter(space, skylake):
    for seed in range(1000):
        _check_against_counter(Core(space, skylake, seed=seed), np.random.default_rng(seed))


def _check_against_counter(core: Core, rng: np.random.Generator) -> None:
    predictor = predictor_for(core)
    counters = {"a": 0, "b": 0}
    for _ in range(int(rng.integers(1, 40))):
        site = "a" if rng.random() < 0.5 else "b"
        taken = bool(rng.random() < 0.6)
        if rng.random() < 0.5:
            train(predictor, site, taken)
        else:
            if taken:
                expected = SpeculationOutcome.ARCHITECTURAL
            elif counters[site] >= 2:
                expected = SpeculationOutcome.TRANSIENT
            else:
                expected = SpeculationOutcome.SKIPPED
            assert speculate(predictor, site, taken, lambda: None) == expected
        counters[site] = min(counters[site] + 1, 3) if taken else max(counters[site] - 1, 0)
        assert predictor.predict(site) is (counters[site] >= 2)
        assert core.window is None


def test_predictor_is_bound_to_core(core):
    assert predictor_for(core) is predictor_for(core)
    assert predictor_for(core.sibling()) is not predictor_for(core)


def test_speculate_runs_body_transiently_after_training(core):
    predictor = predictor_for(core)
    calls = []
    for _ in range(3):
        outcome = speculate(predictor, "bounds", True, lambda: calls.append(1))
        assert outcome == SpeculationOutcome.ARCHITECTURAL

    def body():
        calls.append(core.window is not None)

    assert speculate(predictor, "bounds", False, body) == SpeculationOutcome.TRANSIENT
    assert calls[-1] is True


def test_speculate_skips_untrained_branch(core):
    body = unittest.mock.Mock()
    assert speculate(predictor_for(core), "cold", False, body) == SpeculationOutcome.SKIPPED
    body.assert_not_called()


def test_mispredict_success_probability(space, skylake):
    core = Core(space, skylake.model_copy(update={"mispredict_success_p": 0.0}), seed=0)
    predictor = predictor_for(core)
    for _ in range(3):
        train(predictor, "site", True)
    body = unittest.mock.Mock()
    assert speculate(predictor, "site", False, body) == SpeculationOutcome.SKIPPED
    body.assert_not_called()


def test_transaction_commit_writes_memory(core):
    tx = tx_begin(core)
    core.store_issue(USER_PAGE, b"\x5a")
    assert core.space.read_bytes(USER_PAGE, 1) == b"\x00"
    tx_commit(core, tx)
    assert tx.status == TxStatus.COMMITTED
    assert core.space.read_bytes(USER_PAGE, 1) == b"\x5a"
    assert core.tx is None


def test_transaction_abort_rolls_back_but_keeps_tlb(core):
    tx = tx_begin(core)
    core.store_issue(USER_PAGE, b"\x5a")
    tx_abort(core, tx)
    assert tx.status == TxStatus.ABORTED
    assert tx.touched_vpns == {USER_PAGE >> PAGE_SHIFT}
    assert core.space.read_bytes(USER_PAGE, 1) == b"\x00"
    assert core.store_buffer == []
    assert core.tlb_lookup(AccessKind.DATA, USER_PAGE >> PAGE_SHIFT)
    # the write set was invalidated
    assert not core.is_hit(core.timed_access(USER_PAGE))


def test_fault_inside_transaction_aborts_it(core):
    tx = tx_begin(core)
    result = core.load_issue(UNMAPPED_PAGE, 1)
    assert result.source == LoadSource.SQUASHED
    assert tx.status == TxStatus.ABORTED
    assert core.tx is None


@pytest.mark.parametrize("end", [tx_commit, tx_abort])
def test_transaction_cannot_end_twice(core, end):
    tx = tx_begin(core)
    end(core, tx)
    with pytest.raises(TxStateError):
        end(core, tx)


def test_transactions_do_not_nest(core):
    tx_begin(core)
    with pytest.raises(TxStateError):
        tx_begin(core)
