"""End-to-end demonstrations built on the simulator: misprediction
triggers, a cross-process keystroke monitor, and an in-process sandboxed
read, each with its mitigation counterpart.

Every scenario returns a ScenarioReport; recovery quality is scored as
1 - edit_distance/len, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "ScenarioError",
    "ScenarioReport",
    "levenshtein",
    "recovery_precision",
]


class ScenarioError(Exception):
    """A scenario could not run as configured (bad parameters, unusable
    predictor variant, missing layout room, ...)."""


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute, all cost 1)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1,
                           cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def recovery_precision(expected: str, recovered: str) -> float:
    """1 - lev/max(len), clamped to [0, 1]. Empty-vs-empty scores 1."""
    denom = max(len(expected), len(recovered), 1)
    score = 1.0 - levenshtein(expected, recovered) / denom
    return max(0.0, min(1.0, score))


@dataclass
class ScenarioReport:
    name: str
    expected: str
    recovered: str
    precision: float
    details: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    ok: bool = True     # did the run match its built-in expectation?

    def __str__(self) -> str:
        lines = [f"[{self.name}] precision={self.precision:.3f}"]
        if self.expected:
            lines.append(f"  expected : {self.expected!r}")
            lines.append(f"  recovered: {self.recovered!r}")
        for k, v in self.details.items():
            lines.append(f"  {k}: {v}")
        for n in self.notes:
            lines.append(f"  note: {n}")
        return "\n".join(lines)
