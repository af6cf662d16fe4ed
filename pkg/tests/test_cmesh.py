import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amrforest.cmesh import (
    BUILTIN_MESHES, FACE_CODE_BASE, MeshFormatError, builtin_cmesh, check_partition,
    decode_face, decode_offsets, disjoint_bricks, encode_face, face_is_first, gather_cmesh,
    ghost_trees, mesh_info, min_owner, offsets_from_sets, partition_cmesh, read_text,
    send_range, send_recv_sets, sends_tree, shift_fraction_offsets, split_cmesh, tree_sets,
    uniform_offsets, validate_partition, validate_tree_sets, write_text,
)
from amrforest.element_schemes import FACE_VERTICES, ElementClass
from amrforest.vranks import RankWorld

from conftest import random_tree_sets

EXAMPLE_O = [0, -2, 3, 5]
EXAMPLE_O_NEW = [0, -3, -4, 5]


# -- encoding ----------------------------------------------------------------

@given(st.sampled_from([1, 2, 3]), st.integers(0, 5), st.integers(0, 5))
def test_face_code_round_trip(dim, o, f):
    f %= FACE_CODE_BASE[dim]
    assert decode_face(encode_face(o, f, dim), dim) == (o, f)


def test_decode_offsets_examples():
    assert decode_offsets(EXAMPLE_O, 1) == (1, 2, 2)
    assert decode_offsets(EXAMPLE_O, 0) == (0, 1, 2)
    assert decode_offsets(EXAMPLE_O, 2) == (3, 4, 2)
    O = [0, 7, 7, 7, 7]
    assert decode_offsets(O, 0)[2] == 7
    assert all(decode_offsets(O, p)[2] == 0 for p in range(1, 4))


def test_validate_examples():
    assert validate_partition(EXAMPLE_O) is None
    assert validate_partition(EXAMPLE_O_NEW) is None
    assert validate_partition([0, 9]) is None
    bad = validate_tree_sets([[1], [0]], 2)
    assert bad.prop == "ii" and bad.ranks == (0, 1)
    assert validate_tree_sets([[0, 2], [1]], 3).prop == "i"
    assert validate_tree_sets([[0], [2]], 3).prop == "coverage"
    assert validate_partition([1, 3]).prop == "format"
    assert validate_partition([0, -1, 3]) is None
    assert validate_partition([0, -3, 2, 4]).prop == "format"
    assert validate_partition([0, 3, 2, 4]).prop in ("ii", "format")
    with pytest.raises(ValueError):
        offsets_from_sets([[1], [0]], 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_offsets_encode_decode_identity(K, P, seed):
    rng = np.random.default_rng(seed)
    sets = random_tree_sets(rng, K, P)
    assert validate_tree_sets(sets, K) is None
    O = offsets_from_sets(sets, K)
    assert validate_partition(O) is None
    assert [list(r) for r in tree_sets(O)] == [list(s) for s in sets]
    # negative entries mark exactly the shared first trees
    for p in range(P):
        if O[p] < 0:
            assert any(set(sets[q]) & {sets[p][0]} for q in range(p))


# -- communication pattern -----------------------------------------------------

def brute_force_sends(O, O_new):
    """Designated sender of each tree to each receiver, straight from the rule."""
    old, new = tree_sets(O), tree_sets(O_new)
    P = len(old)
    matrix = [[set() for _ in range(P)] for _ in range(P)]
    for q in range(P):
        for k in new[q]:
            sender = q if k in old[q] else min(r for r in range(P) if k in old[r])
            matrix[sender][q].add(k)
    return matrix


def test_worked_example_send_matrix():
    expected = [[{0, 1}, set(), set()], [{2}, {2}, set()], [set(), {3}, {3, 4}]]
    got = [[{k for k in range(5) if sends_tree(s, q, k, EXAMPLE_O, EXAMPLE_O_NEW)}
            for q in range(3)] for s in range(3)]
    assert got == expected
    assert brute_force_sends(EXAMPLE_O, EXAMPLE_O_NEW) == expected
    assert sends_tree(1, 0, 2, EXAMPLE_O, EXAMPLE_O_NEW)
    assert not sends_tree(1, 0, 1, EXAMPLE_O, EXAMPLE_O_NEW)


def test_worked_example_sets():
    sets = [send_recv_sets(p, EXAMPLE_O, EXAMPLE_O_NEW) for p in range(3)]
    assert [(s.send, s.recv) for s in sets] == [((0,), (0, 1)), ((0, 1), (1, 2)),
                                               ((1, 2), (2,))]
    assert (sets[1].s_first, sets[1].s_last, sets[1].r_first, sets[1].r_last) == (0, 1, 1, 2)


def test_unchanged_partition_stays_home():
    O = [0, -2, 2, 3, 5]
    for p in range(4):
        pat = send_recv_sets(p, O, O)
        assert set(pat.send) <= {p} and set(pat.recv) <= {p}


def test_empty_sets_use_sentinels():
    O = [0, 3, 3]
    O_new = [0, 0, 3]
    pat = send_recv_sets(1, O, O_new)
    assert pat.send == () and (pat.s_first, pat.s_last) == (-1, -2)
    pat0 = send_recv_sets(0, O, O_new)
    assert pat0.recv == () and (pat0.r_first, pat0.r_last) == (-1, -2)


def test_min_owner():
    assert min_owner(1, EXAMPLE_O) == 0
    assert min_owner(2, EXAMPLE_O) == 1
    assert min_owner(4, [0, 5, 5, 5]) == 0


def test_send_recv_sets_match_brute_force_randomized():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        K = int(rng.integers(1, 33))
        P = int(rng.integers(1, 9))
        O = offsets_from_sets(random_tree_sets(rng, K, P), K)
        O_new = offsets_from_sets(random_tree_sets(rng, K, P), K)
        matrix = brute_force_sends(O, O_new)
        for p in range(P):
            pat = send_recv_sets(p, O, O_new)
            assert pat.send == tuple(q for q in range(P) if matrix[p][q])
            assert pat.recv == tuple(s for s in range(P) if matrix[s][p])
            for q in range(P):
                lo, hi = send_range(p, q, O, O_new)
                assert set(range(lo, hi + 1)) == matrix[p][q]


# -- ghost trees -----------------------------------------------------------------

def test_ghost_trees_examples():
    assert ghost_trees(builtin_cmesh("unit_cube_tet6"), [0, 6]) == [[]]
    two = builtin_cmesh("brick", nx=2, ny=1, nz=1)
    assert [[g.gid for g in gs] for gs in ghost_trees(two, [0, 1, 2])] == [[1], [0]]
    four = builtin_cmesh("brick", nx=4, ny=1, nz=1)
    assert [[g.gid for g in gs] for gs in ghost_trees(four, [0, 2, 4])] == [[2], [1]]


def test_ghost_trees_reject_dangling():
    mesh = builtin_cmesh("five_trees")
    mesh.trees[0].tree_to_tree[1] = 99
    with pytest.raises(ValueError):
        ghost_trees(mesh, [0, 5])


# -- repartitioning ----------------------------------------------------------------

def test_comparelevels_right_column():
    mesh = builtin_cmesh("comparelevels")
    O = offsets_from_sets([[0], [1, 2], []], 3)
    O_new = offsets_from_sets([[0], [0, 1], [2]], 3)
    plan = {}
    out = partition_cmesh(split_cmesh(mesh, O), O_new, plan=plan)
    assert plan == {(0, 0): ((0,), (1, 2)), (0, 1): ((0,), ()),
                    (1, 1): ((1,), (2,)), (1, 2): ((2,), (0, 1))}
    for m in out:
        m.check()


def test_identity_partition_sends_nothing_between_ranks():
    mesh = builtin_cmesh("brick", nx=3, ny=2, nz=2)
    O = offsets_from_sets([[0, 1, 2], [2, 3, 4, 5], [6, 7, 8], [8, 9, 10, 11]], 12)
    before = split_cmesh(mesh, O)
    world = RankWorld(4)
    after = partition_cmesh(before, O, world)
    assert all(r.sender == r.receiver for r in world.trace)
    for a, b in zip(before, after):
        assert_same_rank_mesh(a, b)


def test_invalid_target_rejected_before_messages():
    mesh = builtin_cmesh("five_trees")
    world = RankWorld(2)
    with pytest.raises(ValueError):
        partition_cmesh(split_cmesh(mesh, [0, 2, 5]), [0, 3, 2], world)
    assert world.trace == [] and world.phase == 0


def assert_same_rank_mesh(a, b):
    assert np.array_equal(a.offsets, b.offsets)
    assert [t.gid for t in a.trees] == [t.gid for t in b.trees]
    for s, t in zip(a.trees, b.trees):
        assert s.eclass == t.eclass and s.payload == t.payload
        assert np.array_equal(s.tree_to_tree, t.tree_to_tree)
        assert np.array_equal(s.tree_to_face, t.tree_to_face)
    assert len(a.ghosts) == len(b.ghosts)
    assert all(g.same_as(h) for g, h in zip(a.ghosts, b.ghosts))


def check_repartition(mesh, O, O_new):
    before = split_cmesh(mesh, O)
    plan = {}
    world = RankWorld(len(before))
    after = partition_cmesh(before, O_new, world, plan=plan)
    reference = split_cmesh(mesh, O_new)
    for a, b in zip(after, reference):
        a.check()
        assert_same_rank_mesh(a, b)
    # only pairs that exchange local trees carry ghosts
    for (s, q), (trees, ghosts) in plan.items():
        assert trees, (s, q)
    # each receiver gets each tree and ghost exactly once
    for q in range(len(before)):
        got_trees = [k for (s, r), (t, g) in plan.items() if r == q for k in t]
        got_ghosts = [k for (s, r), (t, g) in plan.items() if r == q for k in g]
        assert len(got_trees) == len(set(got_trees))
        assert len(got_ghosts) == len(set(got_ghosts))
    assert len(world.trace) == len(plan)
    return after, plan


def test_disjoint_bricks_43_percent():
    P = 4
    mesh = disjoint_bricks(2, 2, 2, P)
    O = uniform_offsets(mesh.num_trees, P)
    O_new = shift_fraction_offsets(O, 0.43)
    assert [len(r) for r in tree_sets(O_new)] == [5, 8, 8, 11]
    after, plan = check_repartition(mesh, O, O_new)
    for p in range(P - 1):
        trees, ghosts = plan[(p, p + 1)]
        assert len(trees) == 3                     # floor(0.43 * 8)
        assert trees == tuple(range(8 * p + 5, 8 * p + 8))
    assert set(plan) == {(p, p) for p in range(P)} | {(p, p + 1) for p in range(P - 1)}
    multiset = sorted((t.gid, t.eclass, t.payload) for m in after for t in m.trees)
    assert multiset == sorted((t.gid, t.eclass, t.payload) for t in mesh.trees)


@pytest.mark.parametrize("mesh_name,params", [
    ("brick", dict(nx=8, ny=8, nz=1, eclass="quad")),
    ("brick", dict(nx=2, ny=2, nz=2, eclass="tet")),
    ("periodic_brick", dict(nx=4, ny=2, nz=2)),
    ("periodic_square_hybrid", {}),
])
def test_repartition_randomized(mesh_name, params):
    mesh = builtin_cmesh(mesh_name, **params)
    K = mesh.num_trees
    rng = np.random.default_rng(K)
    for _ in range(250):
        P = int(rng.integers(1, 9))
        O = offsets_from_sets(random_tree_sets(rng, K, P), K)
        O_new = offsets_from_sets(random_tree_sets(rng, K, P), K)
        check_repartition(mesh, O, O_new)


def test_round_trip():
    mesh = builtin_cmesh("brick", nx=3, ny=3, nz=2)
    payloaded = type(mesh)(mesh.dim, 0, mesh.offsets, [t.copy() for t in mesh.trees])
    for t in payloaded.trees:
        t.payload = bytes([t.gid])
    rng = np.random.default_rng(3)
    for _ in range(20):
        O = offsets_from_sets(random_tree_sets(rng, 18, 5), 18)
        O_new = offsets_from_sets(random_tree_sets(rng, 18, 5), 18)
        start = split_cmesh(payloaded, O)
        back = partition_cmesh(partition_cmesh(start, O_new), O)
        for a, b in zip(start, back):
            assert_same_rank_mesh(a, b)
        whole = gather_cmesh(back)
        assert [t.payload for t in whole.trees] == [bytes([k]) for k in range(18)]


# -- builtins and geometry ----------------------------------------------------


def _key(v):
    return tuple(np.round(np.asarray(v) * 1e9).astype(np.int64))


@pytest.mark.parametrize("kind", BUILTIN_MESHES)
def test_builtin_connections_match_geometry(kind):
    mesh = builtin_cmesh(kind)
    dim = mesh.dim
    period = 1.0 if kind.startswith("periodic") else None
    for t in mesh.trees:
        for f in range(t.eclass.num_faces):
            conn = mesh.face_connection(t.gid, f)
            if conn.boundary:
                continue
            u = mesh.trees[conn.neighbor_tree]
            back = mesh.face_connection(u.gid, conn.dual_face)
            assert (back.neighbor_tree, back.dual_face, back.orientation) == \
                (t.gid, f, conn.orientation)
            mine = t.vertices[list(FACE_VERTICES[t.eclass][f])]
            theirs = u.vertices[list(FACE_VERTICES[u.eclass][conn.dual_face])]
            if face_is_first(t.eclass, f, u.eclass, conn.dual_face, t.gid, u.gid):
                first, second = mine, theirs
            else:
                first, second = theirs, mine
            shift = second[conn.orientation] - first[0]
            if period is None:
                assert np.allclose(shift, 0)
            else:
                assert np.allclose(np.round(shift / period) * period, shift)
            assert sorted(map(_key, first + shift)) == sorted(map(_key, second))


def test_tet6_shares_the_diagonal():
    mesh = builtin_cmesh("unit_cube_tet6")
    assert mesh.num_trees == 6
    for t in mesh.trees:
        keys = set(map(_key, t.vertices))
        assert _key([0, 0, 0]) in keys and _key([1, 1, 1]) in keys


def test_single_hex_all_boundary():
    mesh = builtin_cmesh("brick", nx=1, ny=1, nz=1)
    assert mesh.num_trees == 1
    assert all(mesh.face_connection(0, f).boundary for f in range(6))


def test_tri2_orientation_zero():
    mesh = builtin_cmesh("unit_square_tri2")
    conn = mesh.face_connection(0, 1)
    assert (conn.neighbor_tree, conn.dual_face, conn.orientation) == (1, 1, 0)


def test_periodic_single_quad_connects_to_itself():
    mesh = builtin_cmesh("periodic_square_quad")
    assert [(c.neighbor_tree, c.dual_face) for c in
            (mesh.face_connection(0, f) for f in range(4))] == [(0, 1), (0, 0), (0, 3), (0, 2)]


def test_hybrid_counts():
    info = mesh_info(builtin_cmesh("unit_square_hybrid"))
    assert info["classes"] == {"quad": 2, "triangle": 4}


def test_unknown_builtin_lists_choices():
    with pytest.raises(ValueError, match="unit_square_quad"):
        builtin_cmesh("moebius")
    with pytest.raises(ValueError):
        builtin_cmesh("brick", nx=0)


# -- text format --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["unit_cube_tet6", "periodic_square_hybrid", "brick"])
def test_text_round_trip(kind):
    mesh = builtin_cmesh(kind)
    again = read_text(write_text(mesh))
    assert write_text(again) == write_text(mesh)
    assert_same_rank_mesh(mesh, again)


def test_reject_asymmetric_file():
    text = write_text(builtin_cmesh("unit_square_tri2"))
    lines = text.splitlines()
    i = next(i for i, ln in enumerate(lines) if ln.startswith("face 0 1 "))
    lines[i] = "face 0 1 1 5"
    with pytest.raises(MeshFormatError, match="asymmetric"):
        read_text("\n".join(lines))


def test_parse_errors_carry_line_numbers():
    with pytest.raises(MeshFormatError, match="line 1"):
        read_text("mesh 2 1\n")
    with pytest.raises(MeshFormatError, match="line 2"):
        read_text("t8txt 1 2 1\ntree 0 quad 0 0 1\n")
    with pytest.raises(MeshFormatError, match="line 3"):
        read_text("t8txt 1 2 1\ntree 0 quad 0 0 1 0 0 1 1 1\nbogus\n")


def test_check_partition_raises():
    with pytest.raises(ValueError):
        check_partition([0, -1])
