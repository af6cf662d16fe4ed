import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amrforest import segments as S
from amrforest.element_schemes import ElementClass

CLASSES = ["line", "quad", "tri", "hex", "tet"]


def naive_histogram(eclass, level):
    table = S.neighbor_table(eclass, level)
    n = len(table)
    hist = {}
    for s in range(n):
        for e in range(s, n):
            c = S.components_of_segment(eclass, level, s, e, table)
            hist[c] = hist.get(c, 0) + 1
    return hist


@pytest.mark.parametrize("eclass,level", [(c, lv) for c in CLASSES for lv in range(0, 4)
                                          if (1 if c == "line" else 2 if c in ("quad", "tri") else 3) * lv <= 6])
def test_sweep_equals_dfs(eclass, level):
    stats = S.enumerate_all(eclass, level)
    assert stats.histogram == naive_histogram(eclass, level)


@pytest.mark.parametrize("eclass", CLASSES)
@pytest.mark.parametrize("level", [0, 1, 2, 3])
def test_histogram_totals(eclass, level):
    stats = S.enumerate_all(eclass, level)
    n = stats.num_elements
    assert stats.total == n * (n + 1) // 2
    assert sum(stats.fraction(c) for c in stats.histogram) == pytest.approx(1.0)
    assert sum(stats.length_sum.values()) == sum((n - s) * (n - s + 1) // 2 for s in range(n))


def test_trivial_segments():
    assert S.components_of_segment("tet", 3, 17, 17) == 1
    assert S.components_of_segment("tri", 3, 0, 63) == 1
    stats = S.enumerate_all("tet", 0)
    assert stats.histogram == {1: 1}


def test_tet_level2_indices_22_to_25_have_four_components():
    assert S.components_of_segment("tet", 2, 22, 25) == 4
    assert S.bound_check("tet", 2)[0] >= 4


def test_triangle_level4_reaches_bound_six():
    observed, bound, (s, e) = S.bound_check("tri", 4)
    assert observed == bound == 6
    assert S.components_of_segment("tri", 4, s, e) == 6


@pytest.mark.parametrize("eclass", ["quad", "hex"])
@pytest.mark.parametrize("level", [1, 2, 3])
def test_morton_cubes_have_at_most_two_components(eclass, level):
    observed, bound, _ = S.bound_check(eclass, level)
    assert observed == bound == 2


def test_quad_level2_fraction_matches_dfs():
    stats = S.enumerate_all("quad", 2)
    naive = naive_histogram("quad", 2)
    assert stats.fraction_connected == naive[1] / sum(naive.values())


def test_range_and_budget_errors():
    with pytest.raises(ValueError):
        S.components_of_segment("quad", 1, 2, 1)
    with pytest.raises(ValueError):
        S.components_of_segment("quad", 1, 0, 4)
    with pytest.raises(S.BudgetExceeded):
        S.enumerate_all("tri", 3, max_extensions=10)
    assert S.enumerate_all("tri", 3, force=True, max_extensions=10).total == 64 * 65 // 2


def test_budget_from_environment(monkeypatch):
    monkeypatch.setenv(S.BUDGET_ENV, "5")
    with pytest.raises(S.BudgetExceeded):
        S.enumerate_all("quad", 1)


def test_bound_violation_is_reported():
    stats = S.enumerate_all("quad", 2)
    stats.max_components = 3
    with pytest.raises(AssertionError):
        S.bound_check("quad", 2, stats)


def test_csv_rows():
    stats = S.enumerate_all("tri", 3)
    text = stats.to_csv().splitlines()
    assert text[0] == "class,level,components,segment_count,avg_length,fraction"
    assert len(text) == 1 + len(stats.histogram)
    for row in stats.rows():
        assert row["avg_length"] == stats.length_sum[row["components"]] / row["segment_count"]


@pytest.mark.parametrize("eclass,level", [("tri", 3), ("tet", 2), ("quad", 3)])
def test_neighbor_table_is_symmetric(eclass, level):
    table = S.neighbor_table(eclass, level)
    for i, row in enumerate(table):
        for q in row[row >= 0]:
            assert i in table[q]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["tri", "tet", "quad", "hex"]), st.data())
def test_component_count_is_bounded(eclass, data):
    level = data.draw(st.integers(1, 3 if eclass in ("tri", "quad") else 2))
    n = 1 << (ElementClass[{"tri": "TRIANGLE", "tet": "TET", "quad": "QUAD",
                             "hex": "HEX"}[eclass]].dim * level)
    s = data.draw(st.integers(0, n - 1))
    e = data.draw(st.integers(s, n - 1))
    c = S.components_of_segment(eclass, level, s, e)
    assert 1 <= c <= S.component_bound(eclass, level)


def test_segment_length_sums_are_integers():
    stats = S.enumerate_all("tet", 2)
    assert all(isinstance(v, int) for v in stats.length_sum.values())
    assert np.isclose(sum(stats.avg_length[c] * stats.histogram[c] for c in stats.histogram),
                      sum(stats.length_sum.values()))


def test_triangle_level2_has_three_component_segment():
    # last child of the first level-1 triangle plus the first two corner
    # children of the second one share vertices only
    assert S.components_of_segment("tri", 2, 3, 5) == 3
    assert S.enumerate_all("tri", 2).max_components == 3
    with pytest.raises(AssertionError):
        S.bound_check("tri", 2)
