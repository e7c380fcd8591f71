"""Domain services of the benchmark harness."""

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List


class HarnessError(Exception):
    """Base class for every error the harness raises on purpose."""


@dataclass
class FailureReport:
    """Skipped or failed items of a batch stage, counted by reason."""
    stage: str
    counts: Counter = field(default_factory=Counter)
    details: List[Dict[str, str]] = field(default_factory=list)

    def add(self, reason: str, detail: str = '', **context):
        self.counts[reason] += 1
        self.details.append({'reason': reason, 'detail': detail, **{k: str(v) for k, v in context.items()}})

    def merge(self, other: 'FailureReport'):
        self.counts.update(other.counts)
        self.details.extend(other.details)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> Dict:
        return {'stage': self.stage, 'total': self.total, 'counts': dict(sorted(self.counts.items())),
                'details': self.details}

    def summary(self) -> str:
        if not self.counts:
            return f"{self.stage}: no failures"
        parts = ", ".join(f"{reason}={count}" for reason, count in sorted(self.counts.items()))
        return f"{self.stage}: {self.total} skipped ({parts})"
