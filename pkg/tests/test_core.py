import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcmtal.core import (
    ActionUnit,
    GroundTruthInstance,
    Interval,
    ValidationError,
    interval_stats,
    validate_unit,
)


def test_interval_length_and_center():
    i = Interval(2.0, 7.0)
    assert i.length == 5.0
    assert i.center == 4.5
    assert interval_stats(i) == (4.5, 5.0)


@pytest.mark.parametrize("s,e", [(3.0, 3.0), (5.0, 1.0), (float("nan"), 1.0),
                                 (0.0, float("inf"))])
def test_malformed_interval_rejected(s, e):
    with pytest.raises(ValidationError) as exc:
        Interval(s, e)
    assert exc.value.code == "malformed-interval"


def test_ground_truth_label_must_be_foreground():
    with pytest.raises(ValidationError) as exc:
        GroundTruthInstance("v", Interval(0, 1), 0)
    assert exc.value.code == "bad-label"


def _unit(feat, ext=None):
    return ActionUnit(0, "v", Interval(0.0, 1.0), feat, ext)


def test_validate_unit_accepts_valid():
    assert validate_unit(_unit(np.ones(4), np.ones(4)), 4) is None


def test_validate_unit_codes():
    with pytest.raises(ValidationError) as exc:
        validate_unit(_unit(np.ones(3)), 4)
    assert exc.value.code == "dimension-mismatch"
    with pytest.raises(ValidationError) as exc:
        validate_unit(_unit(np.array([1.0, np.nan, 0, 0])), 4)
    assert exc.value.code == "non-finite"
    with pytest.raises(ValidationError) as exc:
        validate_unit(_unit(np.ones(4), np.ones(5)), 4)
    assert exc.value.code == "dimension-mismatch"
    with pytest.raises(ValidationError) as exc:
        validate_unit(_unit(None), 4)
    assert exc.value.code == "dimension-mismatch"
    with pytest.raises(ValidationError) as exc:
        validate_unit(object(), 4)
    assert exc.value.code == "malformed-interval"


def test_unit_equality_compares_arrays():
    a = _unit(np.arange(3.0))
    assert a == _unit(np.arange(3.0))
    assert a != _unit(np.arange(3.0) + 1)


junk = st.one_of(st.none(), st.text(max_size=3), st.floats(allow_nan=True),
                 st.lists(st.floats(allow_nan=True, allow_infinity=True), max_size=6))


@settings(max_examples=200, deadline=None)
@given(feat=junk, ext=junk, dim=st.integers(0, 6))
def test_validate_unit_is_total(feat, ext, dim):
    # either accepts or raises ValidationError, never anything else
    try:
        res = validate_unit(_unit(feat, ext), dim)
    except ValidationError as err:
        assert err.code in {"malformed-interval", "dimension-mismatch", "non-finite"}
    else:
        assert res is None


@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6))
def test_interval_stats_roundtrip(s, length):
    e = s + length
    if not e > s:
        return
    c, l = interval_stats(Interval(s, e))
    assert math.isclose(c - l / 2, s, rel_tol=1e-9, abs_tol=1e-6)
    assert l > 0
