from __future__ import annotations

import contextlib
import dataclasses
import enum
import itertools
import logging
import typing as T
from typing import Final

from .custom_types import Body
from .exceptions import TxStateError
from .uarch import Core
from .uarch import Line
from .uarch import StoreBufferEntry

logger = logging.getLogger(__name__)

COUNTER_MAX: Final = 3
TAKEN_THRESHOLD: Final = 2


class Suppression(str, enum.Enum):
    TSX_LIKE = "tsx"
    SIGNAL_LIKE = "signal"
    SPECULATIVE = "speculative"


class SpeculationOutcome(str, enum.Enum):
    ARCHITECTURAL = "architectural"
    TRANSIENT = "transient"
    SKIPPED = "skipped"


class TxStatus(str, enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


def _overhead(core: Core, suppression: Suppression) -> int:
    if suppression == Suppression.TSX_LIKE:
        return core.profile.tsx_overhead
    if suppression == Suppression.SIGNAL_LIKE:
        return core.profile.signal_overhead
    return 0


@dataclasses.dataclass
class TransientWindow:
    suppression: Suppression
    overhead_cycles: int = 0
    squash_log: list[StoreBufferEntry] = dataclasses.field(default_factory=list)


@contextlib.contextmanager
def transient_window(
    core: Core,
    suppression: Suppression = Suppression.TSX_LIKE,
) -> T.Iterator[TransientWindow]:
    window = TransientWindow(suppression=suppression, overhead_cycles=_overhead(core, suppression))
    core.open_window(window)
    try:
        yield window
    finally:
        core.close_window()


def with_window(core: Core, suppression: Suppression, body: Body) -> T.Any:
    """Run ``body`` inside a transient window: faults are suppressed and transient stores squashed."""
    with transient_window(core, suppression):
        return body()


class BranchPredictor:
    """A 2-bit saturating counter per branch site, bound to one core."""

    def __init__(self, core: Core) -> None:
        self.core = core
        self.counters: dict[str, int] = {}

    def predict(self, site: str) -> bool:
        return self.counters.get(site, 0) >= TAKEN_THRESHOLD

    def train(self, site: str, taken: bool) -> None:
        counter = self.counters.get(site, 0)
        self.counters[site] = min(counter + 1, COUNTER_MAX) if taken else max(counter - 1, 0)

    def speculate(self, site: str, actual_condition: bool, body: Body) -> SpeculationOutcome:
        """
        Execute the conditional ``if actual_condition: body()``.

        A taken branch runs ``body`` architecturally. A not-taken branch predicted as taken runs ``body`` in
        an implicit transient window with probability ``mispredict_success_p``. The counter then moves
        towards the actual outcome.
        """
        predicted = self.predict(site)
        if actual_condition:
            body()
            outcome = SpeculationOutcome.ARCHITECTURAL
        elif predicted and self._misspeculates():
            with_window(self.core, Suppression.SPECULATIVE, body)
            outcome = SpeculationOutcome.TRANSIENT
        else:
            outcome = SpeculationOutcome.SKIPPED
        self.train(site, actual_condition)
        return outcome

    def _misspeculates(self) -> bool:
        p = self.core.profile.mispredict_success_p
        return p >= 1 or bool(self.core.rng.random() < p)


def predictor_for(core: Core) -> BranchPredictor:
    if core.predictor is None:
        core.predictor = BranchPredictor(core)
    return core.predictor


def train(pred: BranchPredictor, site: str, taken: bool) -> None:
    pred.train(site, taken)


def speculate(pred: BranchPredictor, site: str, actual_condition: bool, body: Body) -> SpeculationOutcome:
    return pred.speculate(site, actual_condition, body)


_tx_ids = itertools.count(1)


@dataclasses.dataclass
class Transaction:
    tx_id: int = dataclasses.field(default_factory=lambda: next(_tx_ids))
    status: TxStatus = TxStatus.ACTIVE
    touched_vpns: set[int] = dataclasses.field(default_factory=set)
    write_lines: set[Line] = dataclasses.field(default_factory=set)

    def check_active(self) -> None:
        if self.status != TxStatus.ACTIVE:
            raise TxStateError(f"Transaction {self.tx_id} is {self.status.value}")

    def mark_committed(self) -> None:
        self.check_active()
        self.status = TxStatus.COMMITTED

    def mark_aborted(self) -> None:
        self.check_active()
        self.status = TxStatus.ABORTED


def tx_begin(core: Core) -> Transaction:
    tx = Transaction()
    core.begin_transaction(tx)
    return tx


def _check_current(core: Core, tx: Transaction) -> None:
    tx.check_active()
    if core.tx is not tx:
        raise TxStateError(f"Transaction {tx.tx_id} is not active on {core.name}")


def tx_commit(core: Core, tx: Transaction) -> None:
    _check_current(core, tx)
    core.commit_transaction()


def tx_abort(core: Core, tx: Transaction) -> None:
    """Roll the transaction back; the TLB entries it created are kept."""
    _check_current(core, tx)
    core.abort_transaction()
    logger.debug("%s: transaction %d aborted, %d pages touched", core.name, tx.tx_id, len(tx.touched_vpns))
