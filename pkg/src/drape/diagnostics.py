"""Lightweight diagnostics sink shared by the numerical stages."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

log = logging.getLogger("drape")


@dataclass
class Diagnostics:
    """Collects warnings and counters without aborting the computation.

    Stages that degrade gracefully (degenerate normals, overlapping UV
    triangles, collision rescues) report here; callers decide whether the
    result is acceptable.
    """

    messages: list[str] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)

    def warn(self, message: str) -> None:
        self.messages.append(message)
        log.warning(message)

    def count(self, key: str, n: int = 1) -> None:
        self.counters[key] += int(n)

    def as_dict(self) -> dict:
        return {"messages": list(self.messages), "counters": dict(self.counters)}
