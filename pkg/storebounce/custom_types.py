from __future__ import annotations

import typing as T

import numpy as np
from typing_extensions import TypeAlias


StrDict: TypeAlias = T.Dict[str, T.Any]
Vpn: TypeAlias = int
Frame: TypeAlias = int
Cycles: TypeAlias = int
SeedLike: TypeAlias = T.Union[int, np.random.SeedSequence, None]
# A module table row as found in /proc/modules: (name, size in pages)
ModuleRow: TypeAlias = T.Tuple[str, int]
Body: TypeAlias = T.Callable[[], T.Any]
