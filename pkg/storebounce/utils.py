from __future__ import annotations

import collections
import itertools
import typing as T
from typing import Hashable
from typing import Iterable
from typing import List
from typing import Optional
from typing import Tuple
from typing import TypeVar

_T = TypeVar("_T")
_H = TypeVar("_H", bound=Hashable)

try:
    from itertools import pairwise
except ImportError:

    def pairwise(iterable: T.Iterable[_T]) -> T.Iterator[tuple[_T, _T]]:
        # pairwise('ABCDEFG') --> AB BC CD DE EF FG
        a, b = itertools.tee(iterable)
        next(b, None)
        return zip(a, b)


def majority(votes: Iterable[_H]) -> Optional[_H]:
    """
    Return the value holding a strict majority of ``votes`` or ``None`` if there is none.

    >>> majority([7, 7, 3])
    7
    >>> majority([7, 3]) is None
    True
    """
    counter = collections.Counter(votes)
    total = sum(counter.values())
    if not total:
        return None
    value, count = counter.most_common(1)[0]
    if 2 * count > total:
        return value
    return None


def contiguous_runs(values: Iterable[int], step: int = 1) -> List[Tuple[int, int]]:
    """
    Group the sorted ``values`` into ``(start, count)`` runs of consecutive elements ``step`` apart.

    >>> contiguous_runs([1, 2, 3, 7, 8, 10])
    [(1, 3), (7, 2), (10, 1)]
    """
    ordered = sorted(set(values))
    if not ordered:
        return []
    runs: List[Tuple[int, int]] = []
    start, count = ordered[0], 1
    for previous, current in pairwise(ordered):
        if current - previous == step:
            count += 1
        else:
            runs.append((start, count))
            start, count = current, 1
    runs.append((start, count))
    return runs
