"""Measurable sets as finite unions of intervals and rectangles.

Endpoints are :class:`fractions.Fraction`, so measures, slices and the
telescoping construction are exact. Floats passed in are converted exactly
(binary value), strings such as ``"3/8"`` are parsed as rationals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Degenerate or inconsistent set input."""


class SearchFailure(RuntimeError):
    """A finite search did not find an admissible construction."""

    def __init__(self, message, best_margin=None):
        super().__init__(message)
        self.best_margin = best_margin


def as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v.strip())
    if isinstance(v, (int, np.integer)):
        return Fraction(int(v))
    return Fraction(float(v))


def _fmt(v: Fraction):
    """JSON form of an endpoint: int when integral, else the exact "p/q" string."""
    if v.denominator == 1:
        return int(v.numerator)
    return f"{v.numerator}/{v.denominator}"


@dataclass(frozen=True)
class IntervalSet:
    """Finite union of disjoint closed intervals, sorted and merged."""

    intervals: tuple = ()

    @classmethod
    def of(cls, pairs: Iterable[Sequence]) -> "IntervalSet":
        cleaned = []
        for a, b in pairs:
            a, b = as_fraction(a), as_fraction(b)
            if b < a:
                raise GeometryError(f"interval [{a}, {b}] has negative length")
            if b > a:
                cleaned.append((a, b))
        cleaned.sort()
        merged = []
        for a, b in cleaned:
            if merged and a <= merged[-1][1]:
                if b > merged[-1][1]:
                    merged[-1] = (merged[-1][0], b)
            else:
                merged.append((a, b))
        return cls(tuple(merged))

    @classmethod
    def interval(cls, a, b) -> "IntervalSet":
        return cls.of([(a, b)])

    @property
    def measure(self) -> Fraction:
        return sum((b - a for a, b in self.intervals), Fraction(0))

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def lower(self) -> Fraction:
        return self.intervals[0][0]

    @property
    def upper(self) -> Fraction:
        return self.intervals[-1][1]

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet.of(self.intervals + other.intervals)

    def intersect(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        i = j = 0
        A, B = self.intervals, other.intervals
        while i < len(A) and j < len(B):
            a = max(A[i][0], B[j][0])
            b = min(A[i][1], B[j][1])
            if b > a:
                out.append((a, b))
            if A[i][1] < B[j][1]:
                i += 1
            else:
                j += 1
        return IntervalSet(tuple(out))

    def measure_in(self, a, b) -> Fraction:
        """``|self ∩ (a, b)|``."""
        a, b = as_fraction(a), as_fraction(b)
        if b <= a:
            return Fraction(0)
        return self.intersect(IntervalSet(((a, b),))).measure

    def contains(self, t) -> bool:
        t = as_fraction(t)
        return any(a <= t <= b for a, b in self.intervals)

    def is_subset_of(self, other: "IntervalSet") -> bool:
        return self.intersect(other).measure == self.measure

    def max_interval_length(self) -> Fraction:
        return max((b - a for a, b in self.intervals), default=Fraction(0))

    def node_weights(self, edges: np.ndarray) -> np.ndarray:
        """Overlap fraction of each control volume ``[edges[i], edges[i+1]]`` with the set."""
        edges = np.asarray(edges, dtype=float)
        lo, hi = edges[:-1], edges[1:]
        overlap = np.zeros(lo.shape)
        for a, b in self.intervals:
            overlap += np.clip(np.minimum(hi, float(b)) - np.maximum(lo, float(a)), 0.0, None)
        width = hi - lo
        return np.divide(overlap, width, out=np.zeros_like(overlap), where=width > 0)

    def to_json(self, kind: str = "space") -> dict:
        return {"type": kind, "cells": [[_fmt(a), _fmt(b)] for a, b in self.intervals]}

    def __repr__(self):
        body = ", ".join(f"[{a}, {b}]" for a, b in self.intervals)
        return f"IntervalSet({body})"


SpaceSet = IntervalSet
TimeSet = IntervalSet


@dataclass(frozen=True)
class SpaceTimeSet:
    """Finite union of disjoint axis-aligned rectangles ``[x0, x1] x [t0, t1]``.

    Stored in a canonical form: time is cut at every rectangle breakpoint,
    x-intervals are merged per time piece, and consecutive pieces with equal
    cross-sections are fused.
    """

    cells: tuple = ()

    @classmethod
    def of(cls, rects: Iterable[Sequence]) -> "SpaceTimeSet":
        rects = [tuple(as_fraction(v) for v in r) for r in rects]
        for x0, x1, t0, t1 in rects:
            if x1 < x0 or t1 < t0:
                raise GeometryError(f"rectangle {(x0, x1, t0, t1)} has negative extent")
        rects = [r for r in rects if r[1] > r[0] and r[3] > r[2]]
        cuts = sorted({r[2] for r in rects} | {r[3] for r in rects})
        pieces = []
        for t0, t1 in zip(cuts[:-1], cuts[1:]):
            section = IntervalSet.of([(r[0], r[1]) for r in rects if r[2] <= t0 and r[3] >= t1])
            if section.is_empty:
                continue
            if pieces and pieces[-1][1] == t0 and pieces[-1][2] == section:
                pieces[-1] = (pieces[-1][0], t1, section)
            else:
                pieces.append((t0, t1, section))
        cells = tuple(
            (a, b, t0, t1) for t0, t1, section in pieces for a, b in section.intervals
        )
        return cls(cells)

    @classmethod
    def product(cls, space: IntervalSet, time: IntervalSet) -> "SpaceTimeSet":
        return cls.of([(a, b, s, t) for a, b in space for s, t in time])

    @property
    def measure(self) -> Fraction:
        return sum(((x1 - x0) * (t1 - t0) for x0, x1, t0, t1 in self.cells), Fraction(0))

    @property
    def is_empty(self) -> bool:
        return not self.cells

    def time_pieces(self):
        """``[(t0, t1, section)]`` with the cross-section constant on each piece."""
        groups = {}
        for x0, x1, t0, t1 in self.cells:
            groups.setdefault((t0, t1), []).append((x0, x1))
        return [(t0, t1, IntervalSet.of(groups[(t0, t1)])) for t0, t1 in sorted(groups)]

    def slice(self, t) -> IntervalSet:
        """Cross-section ``D_t`` (at a breakpoint the piece to the right wins)."""
        t = as_fraction(t)
        for t0, t1, section in self.time_pieces():
            if t0 <= t < t1:
                return section
        return IntervalSet()

    def time_support(self) -> IntervalSet:
        return IntervalSet.of([(t0, t1) for t0, t1, _ in self.time_pieces()])

    def space_support(self) -> IntervalSet:
        return IntervalSet.of([(x0, x1) for x0, x1, _, _ in self.cells])

    def clip_space(self, omega: IntervalSet) -> "SpaceTimeSet":
        rects = []
        for t0, t1, section in self.time_pieces():
            for a, b in section.intersect(omega):
                rects.append((a, b, t0, t1))
        return SpaceTimeSet.of(rects)

    def clip_time(self, t0, t1) -> "SpaceTimeSet":
        t0, t1 = as_fraction(t0), as_fraction(t1)
        return SpaceTimeSet.of(
            [(a, b, max(s, t0), min(t, t1)) for a, b, s, t in self.cells if min(t, t1) > max(s, t0)]
        )

    def is_subset_of(self, other: "SpaceTimeSet") -> bool:
        return _rect_intersection_measure(self, other) == self.measure

    def to_json(self) -> dict:
        return {"type": "spacetime", "cells": [[_fmt(v) for v in c] for c in self.cells]}


def _rect_intersection_measure(A: SpaceTimeSet, B: SpaceTimeSet) -> Fraction:
    total = Fraction(0)
    for ax0, ax1, at0, at1 in A.cells:
        for bx0, bx1, bt0, bt1 in B.cells:
            dx = min(ax1, bx1) - max(ax0, bx0)
            dt = min(at1, bt1) - max(at0, bt0)
            if dx > 0 and dt > 0:
                total += dx * dt
    return total


# -- serialization ---------------------------------------------------------


def set_from_json(doc):
    """Load a set document; measures are always recomputed from the cells."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    kind = doc.get("type")
    cells = doc.get("cells")
    if not isinstance(cells, list):
        raise GeometryError("set document needs a 'cells' list")
    if kind in ("space", "time"):
        if any(len(c) != 2 for c in cells):
            raise GeometryError(f"{kind} cells must be [a, b] pairs")
        return IntervalSet.of(cells)
    if kind == "spacetime":
        if any(len(c) != 4 for c in cells):
            raise GeometryError("spacetime cells must be [x0, x1, t0, t1]")
        return SpaceTimeSet.of(cells)
    raise GeometryError(f"unknown set type {kind!r}")


def set_to_json(s, kind: str = "space") -> dict:
    if isinstance(s, SpaceTimeSet):
        return s.to_json()
    return s.to_json(kind)


# -- constructions ---------------------------------------------------------


def fat_cantor(level: int, removal_ratio, carrier=(0, 1)) -> IntervalSet:
    """Level-``level`` Smith-Volterra-Cantor pre-set.

    At step ``n`` (``n = 0, 1, ...``) a centred open interval of length
    ``removal_ratio**(n+1) * |carrier|`` is removed from each of the ``2**n``
    surviving intervals.
    """
    r = as_fraction(removal_ratio)
    if level < 0:
        raise GeometryError("level must be >= 0")
    if not 0 < r < Fraction(1, 3):
        raise GeometryError("removal_ratio must lie in (0, 1/3)")
    a0, b0 = as_fraction(carrier[0]), as_fraction(carrier[1])
    if b0 <= a0:
        raise GeometryError("carrier must have positive length")
    L = b0 - a0
    pieces = [(a0, b0)]
    for n in range(level):
        gap = r ** (n + 1) * L
        nxt = []
        for a, b in pieces:
            keep = (b - a - gap) / 2
            if keep <= 0:
                raise GeometryError(
                    f"removal at step {n} exceeds surviving interval length {b - a}"
                )
            nxt.append((a, a + keep))
            nxt.append((b - keep, b))
        pieces = nxt
    return IntervalSet.of(pieces)


def slice_set(D: SpaceTimeSet, omega: IntervalSet, T):
    """Time set where the cross-section is at least half its average.

    Returns ``(E, threshold, clipped_measure)`` with
    ``E = {t in (0, T) : |D_t| >= |D| / (2T)}``. ``D`` is first clipped to
    ``omega x (0, T)``; ``clipped_measure`` is the measure removed by clipping.
    """
    T = as_fraction(T)
    if T <= 0:
        raise GeometryError("T must be positive")
    Dc = D.clip_space(omega).clip_time(0, T)
    clipped = D.measure - Dc.measure
    mD = Dc.measure
    if mD == 0:
        raise GeometryError("D has zero measure inside omega x (0, T)")
    threshold = mD / (2 * T)
    E = IntervalSet.of(
        [(t0, t1) for t0, t1, section in Dc.time_pieces() if section.measure >= threshold]
    )
    return E, threshold, clipped


def density_point(E: IntervalSet, fraction=Fraction(99, 100)):
    """A point ``l`` with ``|E ∩ [l, l + delta]| > fraction * delta``, ``delta = |E|/100``.

    Candidates are interval left endpoints and midpoints, scanned in order.
    """
    mE = E.measure
    if mE == 0:
        raise GeometryError("E has zero measure")
    delta = mE / 100
    for a, b in E.intervals:
        for cand in (a, (a + b) / 2):
            if E.measure_in(cand, cand + delta) > fraction * delta:
                return cand
    raise SearchFailure("no approximate density point among endpoints and midpoints")


@dataclass(frozen=True)
class TelescopingSequence:
    """Decreasing points ``ell_1 > ell_2 > ... > l`` with geometric gaps."""

    l: Fraction
    q: Fraction
    points: tuple
    margins: tuple  # |E ∩ (ell_{n+1}, ell_n)| - (ell_n - ell_{n+1})/3, n = 1..n_max

    def gaps(self):
        return [a - b for a, b in zip(self.points[:-1], self.points[1:])]


def _telescoping_margins(E: IntervalSet, points):
    return tuple(
        E.measure_in(b, a) - (a - b) / 3 for a, b in zip(points[:-1], points[1:])
    )


def telescoping_sequence(
    E: IntervalSet,
    l=None,
    q=Fraction(1, 2),
    n_max: int = 10,
    ell1=None,
    upper=None,
    search_depth: int = 64,
) -> TelescopingSequence:
    """Geometric sequence ``ell_n = l + (ell_1 - l) q^(n-1)`` around a density point.

    ``ell_1`` is taken from a halving grid ``l + (upper - l) / 2^j`` (largest
    first) unless given; the first candidate for which every measure bound
    ``|E ∩ (ell_{n+1}, ell_n)| >= (ell_n - ell_{n+1})/3``, ``n <= n_max``,
    holds is returned. Points ``ell_1 .. ell_{n_max+1}`` are returned.
    """
    q = as_fraction(q)
    if not 0 < q < 1:
        raise GeometryError("q must lie in (0, 1)")
    if E.measure == 0:
        raise GeometryError("E has zero measure")
    if n_max < 1:
        raise GeometryError("n_max must be >= 1")
    l = density_point(E) if l is None else as_fraction(l)
    upper = E.upper if upper is None else as_fraction(upper)

    def build(first):
        d = first - l
        return tuple(l + d * q ** (n - 1) for n in range(1, n_max + 2))

    if ell1 is not None:
        candidates = [as_fraction(ell1)]
    else:
        if upper <= l:
            raise GeometryError("no room above l for the sequence")
        candidates = [l + (upper - l) / 2**j for j in range(search_depth)]
    best = None
    for first in candidates:
        if first <= l:
            continue
        pts = build(first)
        margins = _telescoping_margins(E, pts)
        worst = min(margins)
        if best is None or worst > best:
            best = worst
        if worst >= 0:
            return TelescopingSequence(l=l, q=q, points=pts, margins=margins)
    raise SearchFailure(
        f"no admissible ell_1 found in {len(candidates)} candidates (best margin {best})",
        best_margin=best,
    )
