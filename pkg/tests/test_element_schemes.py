import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amrforest.element_schemes import (
    FACE_VERTICES, SIGMA, ElementClass, ElementKey, Elements, Scheme,
    get_scheme, uniform_elements)

from conftest import ALL_CLASSES, SIMPLICES, levels_by_children, on_plane

TET = ElementClass.TET
TRI = ElementClass.TRIANGLE
QUAD = ElementClass.QUAD
HEX = ElementClass.HEX
LINE = ElementClass.LINE


def key(eclass, anchor, level, btype=0):
    return ElementKey(eclass, tuple(anchor), level, btype)


# -- worked examples ---------------------------------------------------------

def test_triangle_root_coordinates():
    s = Scheme(TRI, 4)
    assert s.coordinates(s.root()) == [(0, 0), (16, 0), (16, 16)]


@pytest.mark.parametrize("btype, expected", [
    (5, [(0, 0, 0), (0, 0, 8), (8, 0, 8), (8, 8, 8)]),
    (4, [(0, 0, 0), (0, 0, 8), (0, 8, 8), (8, 8, 8)]),
    (0, [(0, 0, 0), (8, 0, 0), (8, 0, 8), (8, 8, 8)]),
])
def test_tet_coordinates_follow_reference_simplices(btype, expected):
    s = Scheme(TET, 4)
    assert s.coordinates(key(TET, (0, 0, 0), 1, btype)) == expected


def test_smallest_cube_spans_unit_cell():
    s = Scheme(HEX, 4)
    verts = s.coordinates(key(HEX, (3, 5, 7), 4))
    assert sorted(verts) == sorted(itertools.product((3, 4), (5, 6), (7, 8)))


@pytest.mark.parametrize("at_level, cid", [(1, 1), (2, 2)])
def test_quad_cube_id(at_level, cid):
    s = Scheme(QUAD, 4)
    assert s.cube_id(key(QUAD, (10, 4), 4), at_level) == cid


def test_cube_id_of_zero_anchor_and_bad_level():
    s = Scheme(TET, 4)
    k = key(TET, (0, 0, 0), 3, 2)
    assert [s.cube_id(k, lev) for lev in (1, 2, 3)] == [0, 0, 0]
    with pytest.raises(ValueError):
        s.cube_id(k, 4)


@pytest.mark.parametrize("cid, btype, ptype", [(3, 3, 2), (5, 4, 5)])
def test_parent_type_examples(cid, btype, ptype):
    s = Scheme(TET, 4)
    h = 1 << (4 - 2)
    anchor = [h * ((cid >> a) & 1) for a in range(3)]
    p = s.parent(key(TET, anchor, 2, btype))
    assert p.btype == ptype and p.level == 1 and p.anchor == (0, 0, 0)


def test_root_has_no_parent():
    s = Scheme(TRI, 4)
    with pytest.raises(ValueError, match="root"):
        s.parent(s.root())


def test_bey_and_tm_children_of_the_triangle_root():
    s = Scheme(TRI, 5)
    bey3 = s.child(s.root(), 3, ordering="bey")
    assert bey3 == key(TRI, (16, 0), 1, 1)
    assert s.child(s.root(), 2) == bey3


def test_child_at_max_level_fails():
    s = Scheme(QUAD, 2)
    with pytest.raises(ValueError, match="maximum level"):
        s.child(key(QUAD, (1, 1), 2), 0)


def test_child_id_examples():
    s2 = Scheme(TRI, 4)
    h = 8
    assert s2.child_id(key(TRI, (h, 0), 1, 0)) == 1
    assert s2.child_id(key(TRI, (h, 0), 1, 1)) == 2
    s3 = Scheme(TET, 4)
    for b in range(6):
        assert s3.child_id(key(TET, (h, h, h), 1, b)) == 7


def test_face_neighbor_examples():
    s2 = Scheme(TRI, 4)
    n, dual = s2.face_neighbor_inside(key(TRI, (4, 0), 2, 0), 0)
    assert n == key(TRI, (8, 0), 2, 1) and dual == 2
    s3 = Scheme(TET, 4)
    n, dual = s3.face_neighbor_inside(key(TET, (4, 0, 0), 2, 0), 0)
    assert n == key(TET, (8, 0, 0), 2, 4) and dual == 3


def test_containment_examples():
    s = Scheme(TRI, 4)
    assert not s.inside_root(key(TRI, (0, 0), 1, 1))
    k = key(TRI, (8, 4), 2, 0)
    assert s.is_descendant(k, k)
    with pytest.raises(ValueError):
        s.is_descendant(s.root(), k)


def test_consecutive_index_examples():
    s = Scheme(TET, 4)
    assert s.consecutive_index(s.root()) == 0
    kids = s.children(Elements.from_keys([s.root()]))
    assert s.consecutive_index(kids).tolist() == list(range(8))
    with pytest.raises(ValueError, match="outside"):
        s.consecutive_index(key(TET, (0, 0, 0), 1, 3))


def test_element_from_index_table_example():
    s = Scheme(TET, 4)
    k = s.element_from_index(4, 1)
    assert s.cube_id(k) == 5 and k.btype == 0
    assert s.element_from_index(0, 3) == s.first_descendant(s.root(), 3)
    with pytest.raises(ValueError):
        s.element_from_index(8, 1)


def test_successor_out_of_range():
    s = Scheme(QUAD, 3)
    with pytest.raises(IndexError):
        s.successor(s.element_from_index(63, 3))
    with pytest.raises(IndexError):
        s.predecessor(s.element_from_index(0, 3))


def test_children_at_face_and_child_face_examples():
    s = Scheme(TET, 4)
    assert s.children_at_face(s.root(), 0) == [1, 4, 5, 7]
    # child 5 of a type 0 tet has type 1; it is the middle child of face 0
    assert s.child(s.root(), 5).btype == 1
    assert s.child_face(s.root(), 5, 0) == 0
    assert s.children_at_face(s.root(), 1) == [0, 4, 6, 7]
    middle = [i for i in s.children_at_face(s.root(), 1)
              if s.child(s.root(), i).btype != 0]
    assert [s.child_face(s.root(), i, 1) for i in middle] == [2]
    q = Scheme(QUAD, 4)
    assert q.child_face(q.root(), 2, 0) == 0
    with pytest.raises(ValueError):
        q.child_face(q.root(), 1, 0)


def test_tree_face_and_boundary_face_examples():
    s = Scheme(TET, 4)
    assert s.tree_face(key(TET, (0, 0, 0), 2, 2), 2) == 1
    t = key(TET, (8, 0, 4), 2, 0)
    assert s.boundary_face(t, 1) == key(TRI, (4, 0), 2, 0)
    h = Scheme(HEX, 4)
    assert h.boundary_face(key(HEX, (4, 8, 0), 2), 4) == key(QUAD, (4, 8), 2)


def test_transform_face_examples():
    line = Scheme(LINE, 4)
    f = key(LINE, (4,), 2)
    assert line.transform_face(f, 0) == f
    assert line.transform_face(f, 1) == key(LINE, (16 - 4 - 4,), 2)
    tri = Scheme(TRI, 4)
    f = key(TRI, (8, 4), 2, 0)
    assert tri.transform_face(f, 1, 1) == key(TRI, (16 - 4 - 4, 4), 2, 0)


def test_extrude_face_examples():
    tet = Scheme(TET, 4)
    f = key(TRI, (4, 0), 2, 0)
    assert tet.extrude_face(f, 0) == key(TET, (12, 0, 4), 2, 0)
    quad = Scheme(QUAD, 4)
    assert quad.extrude_face(key(LINE, (8,), 1), 2) == key(QUAD, (8, 0), 1)
    with pytest.raises(ValueError):
        quad.extrude_face(f, 0)


def test_family_nca_compare_examples():
    s = Scheme(TET, 4)
    kids = s.children_list(s.root())
    assert s.is_family(kids)
    assert not s.is_family(kids[:-1])
    assert not s.is_family(kids[:-1] + [kids[0]])
    assert not s.is_family(kids[1:] + kids[:1])
    assert s.nca(kids[2], kids[2]) == kids[2]
    assert s.nca(kids[2], kids[5]) == s.root()
    assert s.compare(s.root(), kids[0]) == -1
    assert s.compare(kids[3], kids[3]) == 0
    with pytest.raises(ValueError):
        s.compare(s.root(), Scheme(HEX, 4).root())


# -- table cross-validation ---------------------------------------------------

@pytest.mark.parametrize("eclass", SIMPLICES, ids=lambda c: c.name.lower())
def test_sigma_matches_tm_ranking(eclass):
    s = Scheme(eclass, 4)
    for b in range(eclass.type_count):
        parent = s.make([[0] * s.dim], 1, b)
        many = Elements.concat([parent] * s.num_children)
        kids = s.child(many, np.arange(s.num_children), ordering="bey")
        tm_keys = s.cube_id(kids) * 8 + kids.btype
        ranking = np.argsort(np.argsort(tm_keys))
        assert ranking.tolist() == SIGMA[s.dim][b].tolist()


@pytest.mark.parametrize("eclass", SIMPLICES, ids=lambda c: c.name.lower())
def test_local_index_tables_are_mutually_inverse(eclass):
    s = Scheme(eclass, 4)
    for b in range(eclass.type_count):
        for i in range(s.num_children):
            cid = s.cid_from_iloc[b, i]
            t = s.type_from_iloc[b, i]
            assert s.iloc[t, cid] == i
            assert s.parent_type[cid, t] == b


@pytest.mark.parametrize("eclass", SIMPLICES, ids=lambda c: c.name.lower())
def test_parent_type_of_bey_children(eclass):
    s = Scheme(eclass, 4)
    for b in range(eclass.type_count):
        parent = s.make([[0] * s.dim], 1, b)
        for i in range(s.num_children):
            child = s.child(parent, i, ordering="bey")
            assert s.parent_type[s.cube_id(child)[0], s.child_types[b, i]] == b


# -- exhaustive checks at small maximum level ----------------------------------

def test_uniform_levels_are_enumerated_in_index_order(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    for level, elems in enumerate(levels):
        index = s.consecutive_index(elems)
        assert index.tolist() == list(range(len(elems)))
        assert s.element_from_index(index, level).equal(elems).all()
        assert s.inside_root(elems).all()


def test_parent_child_identities(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    for parents, kids in zip(levels, levels[1:]):
        k = s.num_children
        assert s.parent(kids).equal(parents[np.repeat(np.arange(len(parents)), k)]).all()
        assert s.child_id(kids).tolist() == list(range(k)) * len(parents)


def test_successor_and_predecessor_sweep(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    elems = levels[3]
    stats = {}
    keys = elems.keys()
    for a, b in zip(keys, keys[1:]):
        assert s.successor(a, stats) == b
        assert s.predecessor(b) == a
    # recursion only happens when the local index wraps
    assert stats["calls"] / (len(keys) - 1) <= 2.0


def test_containment_matches_ancestor_closure(eclass):
    L = 3
    s, levels = levels_by_children(eclass, L, L)
    descendants = {}
    for lev in range(L, -1, -1):
        for k in levels[lev].keys():
            below = {k}
            if lev < L:
                for c in s.children_list(k):
                    below |= descendants[c]
            descendants[k] = below
    for nlev in range(L + 1):
        h = 1 << (L - nlev)
        axis = range(-h, (1 << L) + h, h)
        anchors = np.array(list(itertools.product(axis, repeat=s.dim)))
        nt = eclass.type_count
        cand = s.make(np.repeat(anchors, nt, axis=0), nlev,
                      np.tile(np.arange(nt), len(anchors)))
        cand_keys = cand.keys()
        for tlev in range(nlev + 1):
            for t in levels[tlev].keys():
                tt = s.make([t.anchor] * len(cand), t.level, t.btype)
                got = s.is_descendant(cand, tt)
                expected = np.array([c in descendants[t] for c in cand_keys])
                assert (got == expected).all(), t


def test_face_neighbor_involution_and_shared_face(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    elems = Elements.concat(levels)
    verts = s.vertices(elems)
    fv = FACE_VERTICES[eclass]
    for f in range(s.num_faces):
        nbr, dual = s.face_neighbor_inside(elems, f)
        back, f2 = s.face_neighbor_inside(nbr, dual)
        assert back.equal(elems).all() and (f2 == f).all()
        nverts = s.vertices(nbr)
        for i in range(len(elems)):
            mine = {tuple(v) for v in verts[i][list(fv[f])]}
            theirs = {tuple(v) for v in nverts[i][list(fv[dual[i]])]}
            assert mine == theirs


def test_children_at_face_match_geometry(eclass):
    s, levels = levels_by_children(eclass, 3, 2)
    fv = FACE_VERTICES[eclass]
    for k in Elements.concat(levels).keys():
        verts = np.array(s.coordinates(k))
        kids = s.children_list(k)
        for f in range(s.num_faces):
            plane = verts[list(fv[f])]
            expected = []
            for i, c in enumerate(kids):
                cverts = np.array(s.coordinates(c))
                faces = [g for g in range(s.num_faces) if on_plane(cverts[list(fv[g])], plane)]
                if faces:
                    expected.append((i, faces))
            assert s.children_at_face(k, f) == [i for i, _ in expected]
            for i, faces in expected:
                assert [s.child_face(k, i, f)] == faces


def test_face_descendants_are_extremal(eclass):
    L = 3
    s, levels = levels_by_children(eclass, L, L)
    fv = FACE_VERTICES[eclass]
    for k in Elements.concat(levels[:2]).keys():
        verts = np.array(s.coordinates(k))
        for f in range(s.num_faces):
            plane = verts[list(fv[f])]
            assert s.first_face_descendant(k, f, k.level) == k
            for lev in range(k.level, L + 1):
                touching = []
                for d in levels[lev].keys():
                    if not s.is_descendant(d, k):
                        continue
                    dverts = np.array(s.coordinates(d))
                    if any(on_plane(dverts[list(fv[g])], plane) for g in range(s.num_faces)):
                        touching.append(d)
                touching.sort(key=lambda d: s.consecutive_index(d))
                assert s.first_face_descendant(k, f, lev) == touching[0]
                assert s.last_face_descendant(k, f, lev) == touching[-1]


def test_first_and_last_descendants(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    for k in Elements.concat(levels[:3]).keys():
        first, last = k, k
        while first.level < 3:
            first = s.child(first, 0)
            last = s.child(last, s.num_children - 1)
        assert s.first_descendant(k, 3) == first
        assert s.last_descendant(k, 3) == last
    with pytest.raises(ValueError):
        s.first_descendant(s.root(), 4)


def _face_embedding(face_class, face_points, corner_points, root_len):
    """Map face-lattice points onto the root face spanned by corner_points."""
    c = np.asarray(corner_points)
    out = set()
    for p in face_points:
        if face_class == ElementClass.VERTEX:
            q = c[0] * root_len
        elif face_class == ElementClass.LINE:
            q = c[0] * root_len + p[0] * (c[1] - c[0])
        elif face_class == ElementClass.QUAD:
            q = c[0] * root_len + p[0] * (c[1] - c[0]) + p[1] * (c[2] - c[0])
        else:
            q = c[0] * root_len + (p[0] - p[1]) * (c[1] - c[0]) + p[1] * (c[2] - c[0])
        out.add(tuple(int(v) for v in q))
    return out


def test_boundary_face_extrude_round_trip(eclass):
    L = 3
    s, levels = levels_by_children(eclass, L, L)
    fs = s.face_scheme
    root_len = 1 << L
    root = np.array(s.coordinates(s.root()))
    fv = FACE_VERTICES[eclass]
    checked = 0
    for elems in levels:
        for f in range(s.num_faces):
            nbr, _ = s.face_neighbor_inside(elems, f)
            for i in np.nonzero(~s.inside_root(nbr))[0]:
                k = elems.key(i)
                g = s.tree_face(k, f)
                assert g >= 0
                face = s.boundary_face(k, f)
                assert face.level == k.level
                assert s.extrude_face(face, g) == k
                assert s.element_face_at_root(k.btype, g) == f
                # the face element, placed on root face g, is the element's face
                points = [()] if fs.eclass == ElementClass.VERTEX else fs.coordinates(face)
                placed = _face_embedding(fs.eclass, points, root[list(fv[g])], root_len)
                actual = {tuple(int(v) * root_len for v in p)
                          for p in np.array(s.coordinates(k))[list(fv[f])]}
                assert placed == actual
                checked += 1
    assert checked > 0


def test_interior_faces_of_type_3_tets_never_touch_root():
    s = Scheme(TET, 3)
    for elems in levels_by_children(TET, 3, 3)[1]:
        sel = elems[np.nonzero(elems.btype == 3)[0]]
        for f in range(4):
            nbr, _ = s.face_neighbor_inside(sel, f)
            assert s.inside_root(nbr).all()


# -- SFC axioms -----------------------------------------------------------------

@pytest.mark.parametrize("eclass", [QUAD, TRI, TET], ids=lambda c: c.name.lower())
def test_descendants_sort_into_contiguous_intervals(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    keys = Elements.concat(levels).keys()
    order = sorted(keys, key=lambda k: (s.linear_id(k), k.level))
    pos = {k: i for i, k in enumerate(order)}
    assert len({(s.linear_id(k), k.level) for k in keys}) == len(keys)
    for k in keys:
        desc = [d for d in keys if d.level >= k.level and s.is_descendant(d, k)]
        spots = sorted(pos[d] for d in desc)
        assert spots == list(range(pos[k], pos[k] + len(desc)))
        for d in desc:
            assert s.compare(k, d) <= 0


def test_tm_embedding_matches_morton_index():
    s, levels = levels_by_children(TET, 2, 2)
    L = 2
    for k in Elements.concat(levels).keys():
        anchor, level = s.tm_embed(k)
        digits = s.tm_index(k)
        # Morton digit of the 6D cube with bit order (z y x b2 b1 b0)
        for lev in range(1, L + 1):
            bit = L - lev
            morton_digit = sum(((anchor[j] >> bit) & 1) << j for j in range(6))
            cid, btype = digits[lev - 1]
            assert morton_digit == (cid << 3 | btype)
        if k.level < L:
            for c in s.children_list(k):
                ca, cl = s.tm_embed(c)
                h = 1 << (L - k.level - 1)
                assert cl == level + 1
                assert all(x in (y, y + h) for x, y in zip(ca, anchor))
    assert s.tm_embed(s.root()) == ((0,) * 6, 0)
    with pytest.raises(ValueError):
        Scheme(HEX, 2).tm_embed(Scheme(HEX, 2).root())


def test_is_valid_tm():
    s = Scheme(TET, 3)
    assert s.is_valid_tm([(0, 0)] * 3, 3)
    for k in uniform_elements(s, 3).keys():
        assert s.is_valid_tm(s.tm_index(k), 3)
    digits = s.tm_index(s.element_from_index(100, 3))
    cid, btype = digits[1]
    bad = [(cid, (btype + 1) % 6) if i == 1 else d for i, d in enumerate(digits)]
    assert not s.is_valid_tm(bad, 3)


def test_type_frequencies_equalise_with_level():
    s = get_scheme(TRI, 8)
    elems = uniform_elements(s, 6)
    freq = np.bincount(elems.btype, minlength=2) / len(elems)
    assert np.all(np.abs(freq - 0.5) <= 0.02)


def test_nca_matches_ancestor_walk(eclass):
    s, levels = levels_by_children(eclass, 3, 3)
    elems = Elements.concat(levels)
    rng = np.random.default_rng(0)
    a = elems[rng.integers(0, len(elems), 300)]
    b = elems[rng.integers(0, len(elems), 300)]
    nca = s.nca(a, b)
    assert s.is_descendant(a, nca).all() and s.is_descendant(b, nca).all()
    # one level deeper is no longer common
    deeper = nca.level < np.minimum(a.level, b.level)
    sel = np.nonzero(deeper)[0]
    aa = s.ancestor(a[sel], nca.level[sel] + 1)
    bb = s.ancestor(b[sel], nca.level[sel] + 1)
    assert not aa.equal(bb).any()


# -- property tests ---------------------------------------------------------------

@st.composite
def elements(draw, eclass):
    scheme = get_scheme(eclass)
    level = draw(st.integers(0, 12))
    index = draw(st.integers(0, (1 << (scheme.dim * level)) - 1))
    return scheme, scheme.element_from_index(index, level)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL_CLASSES).flatmap(elements))
def test_random_elements_round_trip(sample):
    s, k = sample
    assert s.inside_root(k)
    idx = s.consecutive_index(k)
    assert s.element_from_index(idx, k.level) == k
    if 0 < idx < (1 << (s.dim * k.level)) - 1:
        assert s.predecessor(s.successor(k)) == k
        assert s.consecutive_index(s.successor(k)) == idx + 1
    if k.level > 0:
        p = s.parent(k)
        assert s.child(p, s.child_id(k)) == k
        assert s.is_descendant(k, p)
        assert not s.is_descendant(k, s.successor(p) if s.consecutive_index(p) <
                                   (1 << (s.dim * p.level)) - 1 else s.predecessor(p)) \
            if p.level > 0 else True
    for f in range(s.num_faces):
        n, dual = s.face_neighbor_inside(k, f)
        assert s.face_neighbor_inside(n, dual) == (k, f)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL_CLASSES).flatmap(elements), st.integers(0, 21))
def test_random_descendants_inside_and_ordered(sample, extra):
    s, k = sample
    level = min(s.max_level, k.level + extra)
    first = s.first_descendant(k, level)
    last = s.last_descendant(k, level)
    assert s.is_descendant(first, k) and s.is_descendant(last, k)
    span = s.consecutive_index(last) - s.consecutive_index(first) + 1
    assert span == 1 << (s.dim * (level - k.level))
    assert s.linear_id(first) == s.linear_id(k)
