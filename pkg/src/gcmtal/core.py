"""Domain records and interval arithmetic shared by the other modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

BACKGROUND = 0


class ValidationError(ValueError):
    """Raised when a record violates its invariants.

    ``code`` is one of ``"malformed-interval"``, ``"dimension-mismatch"``,
    ``"non-finite"`` or ``"bad-label"``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class Interval:
    """Closed temporal interval in seconds."""

    start: float
    end: float

    def __post_init__(self):
        s, e = float(self.start), float(self.end)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValidationError("malformed-interval", f"non-finite bounds ({s}, {e})")
        if not e > s:
            raise ValidationError("malformed-interval", f"end {e} <= start {s}")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2.0


def interval_stats(i: Interval) -> tuple[float, float]:
    """Return ``(center, length)`` of an interval."""
    if not i.end > i.start:
        raise ValidationError("malformed-interval", f"end {i.end} <= start {i.start}")
    return (i.start + i.end) / 2.0, i.end - i.start


@dataclass(frozen=True, eq=False)
class ActionUnit:
    """A proposal or feature segment: an interval plus its feature vector(s)."""

    id: int
    video_id: str
    interval: Interval
    feature: np.ndarray
    extended_feature: Optional[np.ndarray] = None
    score: Optional[float] = None
    label: Optional[int] = None

    def __eq__(self, other):
        if not isinstance(other, ActionUnit):
            return NotImplemented
        return (
            self.id == other.id
            and self.video_id == other.video_id
            and self.interval == other.interval
            and self.score == other.score
            and self.label == other.label
            and _same_array(self.feature, other.feature)
            and _same_array(self.extended_feature, other.extended_feature)
        )


def _same_array(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(frozen=True)
class GroundTruthInstance:
    video_id: str
    interval: Interval
    label: int

    def __post_init__(self):
        if int(self.label) < 1:
            raise ValidationError("bad-label", f"ground-truth label {self.label} < 1")


def validate_unit(u: ActionUnit, expected_dim: int) -> None:
    """Check a unit against the dataset feature dimension.

    Returns ``None`` when the unit is valid, otherwise raises
    :class:`ValidationError` carrying a distinct ``code``.
    """
    try:
        s, e = float(u.interval.start), float(u.interval.end)
        vecs = (("feature", u.feature), ("extended_feature", u.extended_feature))
    except (AttributeError, TypeError, ValueError):
        raise ValidationError("malformed-interval", "interval missing or not numeric")
    if not (math.isfinite(s) and math.isfinite(e) and e > s):
        raise ValidationError("malformed-interval", f"bad bounds ({s}, {e})")
    for name, vec in vecs:
        if vec is None:
            if name == "feature":
                raise ValidationError("dimension-mismatch", "feature missing")
            continue
        try:
            arr = np.asarray(vec, dtype=np.float64)
        except (TypeError, ValueError):
            raise ValidationError("non-finite", f"{name} is not numeric")
        if arr.ndim != 1 or arr.shape[0] != expected_dim:
            raise ValidationError(
                "dimension-mismatch", f"{name} has shape {arr.shape}, expected ({expected_dim},)"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("non-finite", f"{name} contains non-finite entries")
