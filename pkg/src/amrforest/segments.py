"""Face-connected components of SFC segments in a uniformly refined tree."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .cmesh import CLASS_BY_NAME
from .element_schemes import ElementClass, get_scheme

# incremental segment extensions allowed without an explicit override
DEFAULT_BUDGET = 6 * 10 ** 8
BUDGET_ENV = "T8X_BUDGET"


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class SegmentStats:
    eclass: ElementClass
    level: int
    histogram: dict[int, int]
    length_sum: dict[int, int] = field(repr=False)
    max_components: int = 1
    witness: tuple[int, int] = (0, 0)

    @property
    def num_elements(self) -> int:
        return 1 << (self.eclass.dim * self.level)

    @property
    def total(self) -> int:
        return sum(self.histogram.values())

    @property
    def avg_length(self) -> dict[int, float]:
        """Mean element count of the segments in each component-count bucket."""
        return {c: self.length_sum[c] / n for c, n in self.histogram.items()}

    def fraction(self, components: int) -> float:
        return self.histogram.get(components, 0) / self.total

    @property
    def fraction_connected(self) -> float:
        return self.fraction(1)

    def rows(self) -> list[dict]:
        avg = self.avg_length
        return [{"class": self.eclass.name.lower(), "level": self.level, "components": c,
                 "segment_count": n, "avg_length": avg[c], "fraction": n / self.total}
                for c, n in sorted(self.histogram.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["class", "level", "components", "segment_count",
                                 "avg_length", "fraction"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


def _resolve_class(eclass) -> ElementClass:
    if isinstance(eclass, str):
        return CLASS_BY_NAME[eclass]
    return ElementClass(eclass)


def neighbor_table(eclass, level: int) -> np.ndarray:
    """(N, faces) consecutive index of each same-level face neighbor inside the root, -1 outside."""
    eclass = _resolve_class(eclass)
    sch = get_scheme(eclass, max(level, 1))
    n = 1 << (eclass.dim * level)
    elems = sch.element_from_index(np.arange(n, dtype=np.int64), level)
    table = np.full((n, eclass.num_faces), -1, np.int64)
    for f in range(eclass.num_faces):
        nb, _ = sch.face_neighbor_inside(elems, f)
        inside = sch.inside_root(nb)
        table[inside, f] = sch.consecutive_index(nb[np.flatnonzero(inside)])
    return table


@numba.njit(cache=True)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@numba.njit(cache=True)
def _sweep(nbr, first_start, last_start, hist, length_sum):
    """Extend each start in [first_start, last_start) to the end of the curve.

    Adding an element only merges components, so a union-find over the
    segment gives the component count of every prefix in one pass.
    Returns (max components, witness start, witness end).
    """
    n, nf = nbr.shape
    parent = np.empty(n, np.int64)
    size = np.empty(n, np.int64)
    best, best_s, best_e = 0, 0, 0
    for s in range(first_start, last_start):
        comps = 0
        for e in range(s, n):
            parent[e] = e
            size[e] = 1
            comps += 1
            for f in range(nf):
                q = nbr[e, f]
                if q < s or q >= e:
                    continue
                a = _find(parent, e)
                b = _find(parent, q)
                if a != b:
                    if size[a] < size[b]:
                        a, b = b, a
                    parent[b] = a
                    size[a] += size[b]
                    comps -= 1
            hist[comps] += 1
            length_sum[comps] += e - s + 1
            if comps > best:
                best, best_s, best_e = comps, s, e
    return best, best_s, best_e


def segment_count(eclass, level: int) -> int:
    n = 1 << (_resolve_class(eclass).dim * level)
    return n * (n + 1) // 2


def budget() -> int:
    value = os.environ.get(BUDGET_ENV)
    return int(float(value)) if value else DEFAULT_BUDGET


def enumerate_all(eclass, level: int, force: bool = False,
                  max_extensions: int | None = None) -> SegmentStats:
    """Histogram of component counts over every segment [start, end] of the level-``level`` curve."""
    eclass = _resolve_class(eclass)
    if level < 0:
        raise ValueError("level must be nonnegative")
    limit = budget() if max_extensions is None else max_extensions
    work = segment_count(eclass, level)
    if work > limit and not force:
        raise BudgetExceeded(f"{work} segment extensions exceed the budget of {limit}; "
                             f"pass force=True or set {BUDGET_ENV}")
    nbr = neighbor_table(eclass, level)
    n = len(nbr)
    hist = np.zeros(n + 2, np.int64)
    length_sum = np.zeros(n + 2, np.int64)
    best, s, e = _sweep(nbr, 0, n, hist, length_sum)
    nz = np.flatnonzero(hist)
    return SegmentStats(eclass, level, {int(c): int(hist[c]) for c in nz},
                        {int(c): int(length_sum[c]) for c in nz}, int(best), (int(s), int(e)))


def components_of_segment(eclass, level: int, start: int, end: int,
                          table: np.ndarray | None = None) -> int:
    """Face-connected components of the leaves start..end (inclusive), by depth-first search."""
    eclass = _resolve_class(eclass)
    n = 1 << (eclass.dim * level)
    if not 0 <= start <= end < n:
        raise ValueError(f"segment [{start}, {end}] outside 0..{n - 1}")
    nbr = neighbor_table(eclass, level) if table is None else table
    seen = np.zeros(end - start + 1, bool)
    comps = 0
    for root in range(start, end + 1):
        if seen[root - start]:
            continue
        comps += 1
        seen[root - start] = True
        stack = [root]
        while stack:
            x = stack.pop()
            for q in nbr[x]:
                if start <= q <= end and not seen[q - start]:
                    seen[q - start] = True
                    stack.append(int(q))
    return comps


def component_bound(eclass, level: int) -> int:
    """Proven upper bound on the components of any segment."""
    eclass = _resolve_class(eclass)
    if level == 0 or eclass.dim == 1:
        return 1
    if not eclass.is_simplex:
        return 2
    if level == 1:
        return 2
    return 2 * (level - 1) if eclass.dim == 2 else 2 * level + 1


def bound_check(eclass, level: int, stats: SegmentStats | None = None,
                force: bool = False) -> tuple[int, int, tuple[int, int]]:
    """(max observed, bound, witness segment); raises AssertionError if the bound is violated."""
    stats = enumerate_all(eclass, level, force=force) if stats is None else stats
    bound = component_bound(stats.eclass, stats.level)
    if stats.max_components > bound:
        raise AssertionError(f"{stats.eclass.name} level {stats.level}: segment {stats.witness} "
                             f"has {stats.max_components} components, bound is {bound}")
    return stats.max_components, bound, stats.witness
