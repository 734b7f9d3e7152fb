from __future__ import annotations

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degenlab.geometry import (
    GeometryError,
    IntervalSet,
    SearchFailure,
    SpaceTimeSet,
    density_point,
    fat_cantor,
    set_from_json,
    set_to_json,
    slice_set,
    telescoping_sequence,
)

frac = st.fractions(min_value=0, max_value=1, max_denominator=64)


@st.composite
def interval_sets(draw, max_size=5):
    pairs = draw(st.lists(st.tuples(frac, frac), max_size=max_size))
    return IntervalSet.of([(min(a, b), max(a, b)) for a, b in pairs])


@st.composite
def spacetime_sets(draw, max_size=5):
    rects = draw(st.lists(st.tuples(frac, frac, frac, frac), min_size=1, max_size=max_size))
    return SpaceTimeSet.of([(min(a, b), max(a, b), min(s, t), max(s, t)) for a, b, s, t in rects])


@settings(max_examples=200)
@given(A=interval_sets(), B=interval_sets())
def test_inclusion_exclusion(A, B):
    assert A.union(B).measure + A.intersect(B).measure == A.measure + B.measure


@settings(max_examples=100)
@given(A=interval_sets(), B=interval_sets())
def test_intersection_is_subset(A, B):
    C = A.intersect(B)
    assert C.is_subset_of(A) and C.is_subset_of(B)
    assert A.is_subset_of(A.union(B))


@settings(max_examples=100)
@given(A=interval_sets())
def test_canonical_form_disjoint_sorted(A):
    ivs = A.intervals
    assert all(a < b for a, b in ivs)
    assert all(b0 < a1 for (_, b0), (a1, _) in zip(ivs[:-1], ivs[1:]))


@settings(max_examples=100)
@given(A=interval_sets(), a=frac, b=frac)
def test_measure_in_window(A, a, b):
    a, b = min(a, b), max(a, b)
    assert A.measure_in(a, b) == A.intersect(IntervalSet.interval(a, b)).measure


@settings(max_examples=100)
@given(A=interval_sets(), n=st.integers(16, 200))
def test_node_weights_integrate_measure(A, n):
    edges = np.linspace(0, 1, n + 1)
    w = A.node_weights(edges)
    assert np.all((w >= 0) & (w <= 1 + 1e-15))
    assert float(np.sum(w * np.diff(edges))) == pytest.approx(float(A.measure), abs=1e-12)


@settings(max_examples=100)
@given(A=interval_sets())
def test_json_round_trip(A):
    doc = json.loads(json.dumps(set_to_json(A, "time")))
    assert set_from_json(doc) == A


@settings(max_examples=100)
@given(D=spacetime_sets())
def test_spacetime_json_round_trip(D):
    assert set_from_json(json.dumps(D.to_json())) == D


@settings(max_examples=100)
@given(D=spacetime_sets())
def test_fubini(D):
    """Measure equals the integral of the cross-section measure over time."""
    total = sum(((t1 - t0) * s.measure for t0, t1, s in D.time_pieces()), Fraction(0))
    assert total == D.measure


@settings(max_examples=100)
@given(S=interval_sets(), T=interval_sets())
def test_product_measure(S, T):
    assert SpaceTimeSet.product(S, T).measure == S.measure * T.measure


@settings(max_examples=100)
@given(D=spacetime_sets(), w=interval_sets())
def test_clip_space_is_subset(D, w):
    C = D.clip_space(w)
    assert C.is_subset_of(D)
    assert C.space_support().is_subset_of(w) or C.is_empty


def test_rect_order_invariant():
    r = [(0, "1/2", 0, "1/2"), ("1/4", 1, "1/4", 1)]
    assert SpaceTimeSet.of(r) == SpaceTimeSet.of(r[::-1])
    assert SpaceTimeSet.of(r).measure == Fraction(1, 4) + Fraction(9, 16) - Fraction(1, 16)


def test_slice_cross_section():
    D = SpaceTimeSet.of([(0, "1/2", 0, "1/2"), ("1/4", 1, "1/4", 1)])
    assert D.slice(Fraction(1, 8)) == IntervalSet.interval(0, Fraction(1, 2))
    assert D.slice(Fraction(1, 3)) == IntervalSet.interval(0, 1)
    assert D.slice(2).is_empty


def test_bad_sets():
    with pytest.raises(GeometryError):
        IntervalSet.of([(1, 0)])
    with pytest.raises(GeometryError):
        set_from_json({"type": "blob", "cells": []})
    with pytest.raises(GeometryError):
        set_from_json({"type": "space", "cells": [[0, 1, 2]]})


def test_fat_cantor_level_one():
    E = fat_cantor(1, Fraction(1, 4))
    assert E == IntervalSet.of([(0, Fraction(3, 8)), (Fraction(5, 8), 1)])
    assert E.measure == Fraction(3, 4)


@pytest.mark.parametrize("level", range(6))
@pytest.mark.parametrize("r", [Fraction(1, 4), Fraction(1, 5), Fraction(1, 10)])
def test_fat_cantor_measure(level, r):
    E = fat_cantor(level, r)
    assert E.measure == 1 - sum(2**n * r ** (n + 1) for n in range(level))
    assert len(E.intervals) == 2**level


def test_fat_cantor_nested_and_carrier():
    assert fat_cantor(3, Fraction(1, 4)).is_subset_of(fat_cantor(2, Fraction(1, 4)))
    E = fat_cantor(2, Fraction(1, 4), carrier=(Fraction(1, 2), 1))
    assert E.measure == fat_cantor(2, Fraction(1, 4)).measure / 2
    with pytest.raises(GeometryError):
        fat_cantor(2, Fraction(1, 2))


@settings(max_examples=100)
@given(D=spacetime_sets(), T=st.fractions(Fraction(1, 8), 2, max_denominator=16))
def test_slicing_bound_property(D, T):
    omega = D.space_support()
    try:
        E, thr, clipped = slice_set(D, omega, T)
    except GeometryError:
        return  # no mass inside omega x (0, T)
    Dc = D.clip_time(0, T)
    assert clipped == D.measure - Dc.measure
    assert E.measure >= Dc.measure / (2 * omega.measure)
    assert all(Dc.slice(t).measure >= thr for t, _ in E.intervals)


def test_density_point():
    E = fat_cantor(3, Fraction(1, 4))
    l = density_point(E)
    delta = E.measure / 100
    assert E.measure_in(l, l + delta) > Fraction(99, 100) * delta


def test_telescoping_fat_cantor():
    E = fat_cantor(3, Fraction(1, 4))
    seq = telescoping_sequence(E, q=Fraction(1, 2), n_max=10)
    assert seq.l == 0
    assert seq.points[:3] == (1, Fraction(1, 2), Fraction(1, 4))
    gaps = seq.gaps()
    assert all(g1 == seq.q * g0 for g0, g1 in zip(gaps[:-1], gaps[1:]))
    assert min(seq.margins) >= 0


@settings(max_examples=50, deadline=None)
@given(q=st.fractions(Fraction(1, 8), Fraction(7, 8), max_denominator=16), n=st.integers(1, 12))
def test_telescoping_invariants(q, n):
    E = IntervalSet.of([(0, Fraction(1, 2)), (Fraction(3, 4), 1)])
    seq = telescoping_sequence(E, q=q, n_max=n)
    assert len(seq.points) == n + 1
    assert all(a > b for a, b in zip(seq.points[:-1], seq.points[1:]))
    assert all(E.measure_in(b, a) >= (a - b) / 3 for a, b in zip(seq.points[:-1], seq.points[1:]))


def test_telescoping_failure_reports_margin():
    E = IntervalSet.of([(0, Fraction(1, 100))])
    with pytest.raises(SearchFailure) as info:
        telescoping_sequence(E, l=Fraction(1, 2), upper=1, n_max=3)
    assert info.value.best_margin < 0


def test_telescoping_rejects_bad_q():
    with pytest.raises(GeometryError):
        telescoping_sequence(fat_cantor(1, Fraction(1, 4)), q=1)
