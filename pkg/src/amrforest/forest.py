"""Forests of refinement trees over a partitioned coarse mesh.

A :class:`Forest` is an immutable snapshot.  Each rank holds a contiguous
piece of the global leaf order (tree id, then SFC position), stored as flat
arrays.  Operations return new snapshots; every cross-rank effect goes
through :mod:`amrforest.vranks` phases on the forest's shared world.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .cmesh import (CoarseMesh, decode_offsets, face_is_first, offsets_from_sets,
                    partition_cmesh, split_cmesh)
from .element_schemes import (MAX_LEVEL, ElementClass, ElementKey, Elements, Scheme,
                              face_sign, get_scheme)
from .vranks import RankWorld, all_reduce_and, allgather, exchange

_GENERATIONS = itertools.count()


# ---------------------------------------------------------------------------
# Leaf storage


@dataclass(frozen=True)
class LeafSet:
    """One rank's leaves in global order as parallel arrays."""

    tree: np.ndarray    # (n,) global tree id
    coords: np.ndarray  # (n, d)
    level: np.ndarray
    btype: np.ndarray

    def __len__(self) -> int:
        return len(self.tree)

    @classmethod
    def empty(cls, dim: int) -> "LeafSet":
        z = np.zeros(0, np.int64)
        return cls(z, np.zeros((0, dim), np.int64), z.copy(), z.copy())

    @classmethod
    def from_elements(cls, tree: int, elems: Elements) -> "LeafSet":
        return cls(np.full(len(elems), tree, np.int64), elems.coords, elems.level, elems.btype)

    @classmethod
    def concat(cls, parts: list["LeafSet"], dim: int) -> "LeafSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(dim)
        return cls(np.concatenate([p.tree for p in parts]),
                   np.concatenate([p.coords for p in parts]),
                   np.concatenate([p.level for p in parts]),
                   np.concatenate([p.btype for p in parts]))

    def take(self, idx) -> "LeafSet":
        return LeafSet(self.tree[idx], self.coords[idx], self.level[idx], self.btype[idx])

    def tree_ranges(self) -> dict[int, tuple[int, int]]:
        if not len(self.tree):
            return {}
        cut = np.flatnonzero(np.diff(self.tree)) + 1
        starts = np.concatenate([[0], cut])
        ends = np.concatenate([cut, [len(self.tree)]])
        return {int(self.tree[a]): (int(a), int(b)) for a, b in zip(starts, ends)}

    def elements(self, eclass: ElementClass, a: int, b: int) -> Elements:
        return Elements(eclass, self.coords[a:b], self.level[a:b], self.btype[a:b])


# ---------------------------------------------------------------------------
# Ghost layer


@dataclass
class GhostLayer:
    """Remote leaves face-adjacent to local leaves of one rank."""

    remotes: dict[int, np.ndarray]  # q -> local leaf indices that q receives
    leaves: LeafSet                 # ghosts, grouped by owner then (tree, SFC)
    owners: np.ndarray
    lids: np.ndarray
    tree_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.owners)

    @classmethod
    def empty(cls, dim: int) -> "GhostLayer":
        z = np.zeros(0, np.int64)
        return cls({}, LeafSet.empty(dim), z, z.copy())


# ---------------------------------------------------------------------------
# The forest snapshot


class Forest:
    """Partitioned leaves plus the tables needed for owner queries."""

    def __init__(self, world: RankWorld, cmeshes: list[CoarseMesh], leafsets: list[LeafSet],
                 max_level: int, tree_classes: np.ndarray, *, element_offsets=None,
                 first_desc=None, source=None, source_generation=None, warnings=()):
        self.world = world
        self.cmeshes = list(cmeshes)
        self.leafsets = list(leafsets)
        self.max_level = int(max_level)
        self.tree_classes = np.asarray(tree_classes, np.int64)
        self.dim = self.cmeshes[0].dim
        self.generation = next(_GENERATIONS)
        self.ghosts: list[GhostLayer] | None = None
        self.source = source
        self.source_generation = source_generation
        self.warnings = list(warnings)
        self.ranges = [ls.tree_ranges() for ls in self.leafsets]
        self.lids = [self._linear_ids(ls) for ls in self.leafsets]
        P = world.size
        if element_offsets is None:
            counts = allgather(world, [len(ls) for ls in self.leafsets], "leaf_counts")[0]
            element_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.element_offsets = np.asarray(element_offsets, np.int64)
        if first_desc is None:
            mine = [(int(ls.tree[0]), int(lid[0])) if len(ls) else (-1, -1)
                    for ls, lid in zip(self.leafsets, self.lids)]
            first_desc = allgather(world, mine, "first_desc")[0]
        self.first_desc = np.asarray(first_desc, np.int64).reshape(P, 2)
        nonempty = np.flatnonzero(np.diff(self.element_offsets) > 0)
        self._fd_rank = nonempty
        self._fd_tree = self.first_desc[nonempty, 0]
        self._fd_lid = self.first_desc[nonempty, 1]

    # -- basic queries ------------------------------------------------------

    @property
    def num_ranks(self) -> int:
        return self.world.size

    @property
    def num_trees(self) -> int:
        return len(self.tree_classes)

    @property
    def num_leaves(self) -> int:
        return int(self.element_offsets[-1])

    def local_count(self, p: int) -> int:
        return len(self.leafsets[p])

    def counts(self) -> np.ndarray:
        return np.diff(self.element_offsets)

    def tree_class(self, tree: int) -> ElementClass:
        return ElementClass(int(self.tree_classes[tree]))

    def scheme(self, tree: int) -> Scheme:
        return get_scheme(self.tree_class(tree), self.max_level)

    def tree_leaves(self, p: int, tree: int) -> Elements:
        a, b = self.ranges[p].get(tree, (0, 0))
        return self.leafsets[p].elements(self.tree_class(tree), a, b)

    def iter_trees(self, p: int) -> Iterator[tuple[int, int, int, Elements]]:
        """(tree, first index, end index, leaves) for each local tree."""
        ls = self.leafsets[p]
        for t, (a, b) in self.ranges[p].items():
            yield t, a, b, ls.elements(self.tree_class(t), a, b)

    def all_leaves(self) -> list[tuple[int, ElementKey]]:
        """Global leaf list (tree, key) in SFC order, for oracles and demos."""
        out = []
        for p in range(self.num_ranks):
            for t, _, _, elems in self.iter_trees(p):
                out.extend((t, k) for k in elems.keys())
        return out

    def ghost_count(self, p: int) -> int:
        return 0 if self.ghosts is None else len(self.ghosts[p])

    def cmesh_for(self, tree: int) -> CoarseMesh:
        """A per-rank coarse mesh that holds ``tree`` as a local tree."""
        for m in self.cmeshes:
            if m.n_p and m.is_local(tree):
                return m
        raise KeyError(f"no rank holds tree {tree}")

    def _linear_ids(self, ls: LeafSet) -> np.ndarray:
        out = np.zeros(len(ls), np.int64)
        for t, (a, b) in ls.tree_ranges().items():
            out[a:b] = self.scheme(t).linear_id(ls.elements(self.tree_class(t), a, b))
        return out

    def _with(self, **changes) -> "Forest":
        """Shallow copy with a fresh generation (used to attach ghosts)."""
        clone = object.__new__(Forest)
        clone.__dict__.update(self.__dict__)
        clone.__dict__.update(changes)
        clone.generation = next(_GENERATIONS)
        return clone

    # -- owner search ---------------------------------------------------------

    def owner_of_lids(self, tree: int, lids, lo: int | None = None,
                      hi: int | None = None) -> np.ndarray:
        """Rank owning the max-level element with linear id ``lids`` in ``tree``.

        ``lo``/``hi`` bracket the ranks to search when bounds are known.
        """
        lids = np.asarray(lids, np.int64)
        ranks, ftree, flid = self._fd_rank, self._fd_tree, self._fd_lid
        a, b = 0, len(ranks)
        if lo is not None:
            a = int(np.searchsorted(ranks, lo, "left"))
        if hi is not None:
            b = int(np.searchsorted(ranks, hi, "right"))
        ta = a + int(np.searchsorted(ftree[a:b], tree, "left"))
        tb = a + int(np.searchsorted(ftree[a:b], tree, "right"))
        pos = ta + np.searchsorted(flid[ta:tb], lids, "right") - 1
        if np.any(pos < a):
            raise ValueError("owner query outside the searched rank range")
        return ranks[pos]

    def check(self) -> None:
        """Assert ordering, non-overlap, counts and exact tree coverage."""
        d = self.dim
        volume = np.zeros(self.num_trees)
        for p in range(self.num_ranks):
            ls = self.leafsets[p]
            assert len(ls) == self.element_offsets[p + 1] - self.element_offsets[p]
            assert np.all(np.diff(ls.tree) >= 0)
            for t, a, b, elems in self.iter_trees(p):
                sch = self.scheme(t)
                assert sch.inside_root(elems).all()
                lid = self.lids[p][a:b]
                last = sch.linear_id(sch.last_descendant(elems))
                assert np.all(lid[1:] > last[:-1]), "leaves overlap or are unsorted"
                np.add.at(volume, t, np.sum(2.0 ** (-d * elems.level.astype(float))))
        if self.num_leaves:
            assert np.allclose(volume, 1.0), volume
        gkeys = [(int(t), int(l)) for t, l in self.first_desc[self._fd_rank]]
        assert gkeys == sorted(gkeys)


def owner(forest: Forest, tree: int, key: ElementKey) -> int:
    """Rank owning the first descendant of ``key``."""
    lid = forest.scheme(tree).linear_id(key)
    return int(forest.owner_of_lids(tree, [lid])[0])


def owner_range_batch(forest: Forest, tree: int, elems: Elements,
                      lo: int | None = None, hi: int | None = None):
    sch = forest.scheme(tree)
    first = forest.owner_of_lids(tree, sch.linear_id(elems), lo, hi)
    last = forest.owner_of_lids(tree, sch.linear_id(sch.last_descendant(elems)), lo, hi)
    return first, last


def owner_range(forest: Forest, tree: int, key: ElementKey) -> tuple[int, int]:
    """(p_first, p_last): owners of the first and last max-level descendant."""
    a, b = owner_range_batch(forest, tree, Elements.from_keys([key]))
    return int(a[0]), int(b[0])


# ---------------------------------------------------------------------------
# Creation


def _world_for(num_ranks: int, world: RankWorld | None) -> RankWorld:
    if world is None:
        return RankWorld(num_ranks)
    if world.size != num_ranks:
        raise ValueError("world size differs from the rank count")
    return world


def _partition_offsets(leafsets: list[LeafSet], num_trees: int) -> np.ndarray:
    sets = [range(int(ls.tree[0]), int(ls.tree[-1]) + 1) if len(ls) else range(0)
            for ls in leafsets]
    return offsets_from_sets(sets, num_trees)


def new_uniform(cmesh: CoarseMesh, level: int, num_ranks: int = 1,
                max_level: int = MAX_LEVEL, world: RankWorld | None = None) -> Forest:
    """Uniform level-``level`` forest over a replicated coarse mesh.

    Every rank derives its leaf range from the cut-point formula and builds
    its leaves per tree with one batched ``element_from_index`` call.
    """
    if level > max_level or level < 0:
        raise ValueError(f"level {level} outside [0, {max_level}]")
    if cmesh.num_ranks != 1:
        raise ValueError("new_uniform needs a replicated coarse mesh")
    world = _world_for(num_ranks, world)
    P = num_ranks
    K = cmesh.num_trees
    classes = np.array([int(t.eclass) for t in cmesh.trees], np.int64)
    per_tree = 1 << (cmesh.dim * level)
    N = K * per_tree
    cuts = np.array([(p * N) // P for p in range(P + 1)], np.int64)
    leafsets = []
    first_desc = []
    for p in range(P):
        a, b = int(cuts[p]), int(cuts[p + 1])
        parts = []
        for t in range(a // per_tree, (b - 1) // per_tree + 1 if b > a else a // per_tree):
            lo = max(a, t * per_tree) - t * per_tree
            hi = min(b, (t + 1) * per_tree) - t * per_tree
            sch = get_scheme(ElementClass(int(classes[t])), max_level)
            elems = sch.element_from_index(np.arange(lo, hi, dtype=np.int64), level)
            parts.append(LeafSet.from_elements(t, elems))
        ls = LeafSet.concat(parts, cmesh.dim)
        leafsets.append(ls)
        if len(ls):
            t = int(ls.tree[0])
            sch = get_scheme(ElementClass(int(classes[t])), max_level)
            first_desc.append((t, int(sch.linear_id(ls.elements(sch.eclass, 0, 1))[0])))
        else:
            first_desc.append((-1, -1))
    offsets = _partition_offsets(leafsets, K)
    cmeshes = split_cmesh(cmesh, offsets)
    return Forest(world, cmeshes, leafsets, max_level, classes,
                  element_offsets=cuts, first_desc=first_desc)


def _assemble(old: Forest, leafsets: list[LeafSet], **kwargs) -> Forest:
    """New snapshot over ``leafsets``; repartitions the coarse mesh if needed."""
    offsets = _partition_offsets(leafsets, old.num_trees)
    cmeshes = old.cmeshes
    if not np.array_equal(offsets, cmeshes[0].offsets):
        cmeshes = partition_cmesh(cmeshes, offsets, old.world)
    return Forest(old.world, cmeshes, leafsets, old.max_level, old.tree_classes, **kwargs)


# ---------------------------------------------------------------------------
# Cross-tree face neighbors


@dataclass
class NeighborGroup:
    """Same-level neighbors of ``elems[index]`` that lie in one tree."""

    index: np.ndarray
    tree: int
    elements: Elements
    dual: np.ndarray


def face_neighbors(forest: Forest, cmesh: CoarseMesh, tree: int, elems: Elements,
                   face) -> list[NeighborGroup]:
    """Same-level neighbors across ``face``, grouped by neighbor tree.

    Elements whose face lies on the domain boundary appear in no group.
    ``cmesh`` must hold ``tree`` locally or as a ghost with connectivity.
    """
    sch = forest.scheme(tree)
    n = len(elems)
    f = np.broadcast_to(np.asarray(face, np.int64), (n,))
    nb, dual = sch.face_neighbor_inside(elems, f)
    inside = sch.inside_root(nb)
    groups = []
    idx_in = np.flatnonzero(inside)
    if len(idx_in):
        groups.append(NeighborGroup(idx_in, tree, nb[idx_in], dual[idx_in]))
    idx_out = np.flatnonzero(~inside)
    if not len(idx_out):
        return groups
    out = elems[idx_out]
    g_all = sch.tree_face(out, f[idx_out])
    cls = sch.eclass
    for g in np.unique(g_all):
        sel = g_all == g
        idx = idx_out[sel]
        conn = cmesh.face_connection(tree, int(g))
        if conn.boundary:
            continue
        other = ElementClass(int(forest.tree_classes[conn.neighbor_tree]))
        o_sch = get_scheme(other, forest.max_level)
        faces = sch.boundary_face(out[sel], f[idx])
        sign = (face_sign(cls, int(g), other, conn.dual_face)
                * tree_handedness(cmesh, tree, cls) * tree_handedness(cmesh, conn.neighbor_tree, other))
        first = face_is_first(cls, int(g), other, conn.dual_face, tree, conn.neighbor_tree)
        moved = sch.face_scheme.transform_face(faces, conn.orientation, sign, first)
        nbrs = o_sch.extrude_face(moved, conn.dual_face)
        ndual = o_sch.element_face_at_root(nbrs.btype, conn.dual_face)
        groups.append(NeighborGroup(idx, conn.neighbor_tree, nbrs, ndual))
    return groups


def tree_handedness(cmesh: CoarseMesh, tree: int, eclass: ElementClass) -> int:
    """Sign of the Jacobian of the tree's affine map (+1 for 2D and lines)."""
    if eclass.dim < 3:
        return 1
    verts = np.asarray(cmesh.tree_vertices(tree), float)
    A = reference_to_physical(eclass, verts, np.eye(3)) - verts[0]
    return 1 if np.linalg.det(A) > 0 else -1


def forest_face_neighbor(forest: Forest, tree: int, key: ElementKey, face: int):
    """(neighbor key, neighbor tree, dual face), or None at the domain boundary."""
    groups = face_neighbors(forest, forest.cmesh_for(tree), tree,
                            Elements.from_keys([key]), face)
    if not groups:
        return None
    g = groups[0]
    return g.elements.key(0), g.tree, int(g.dual[0])


def half_neighbors_batch(forest: Forest, cmesh: CoarseMesh, tree: int, elems: Elements,
                         face) -> list[list[NeighborGroup]]:
    """Level+1 neighbors, one group list per child touching ``face``."""
    sch = forest.scheme(tree)
    n = len(elems)
    if np.any(elems.level >= forest.max_level):
        raise ValueError("half-face neighbors need level < max level")
    f = np.broadcast_to(np.asarray(face, np.int64), (n,))
    at_face = sch.children_at_face(elems, f)
    out = []
    for j in range(at_face.shape[1]):
        ci = at_face[:, j]
        kids = sch.child(elems, ci)
        cf = sch.child_face(elems, ci, f)
        out.append(face_neighbors(forest, cmesh, tree, kids, cf))
    return out


def half_face_neighbors(forest: Forest, tree: int, key: ElementKey, face: int):
    """List of (key, tree, dual) for the level+1 neighbors across ``face``."""
    if key.level >= forest.max_level:
        raise ValueError("half-face neighbors need level < max level")
    per_child = half_neighbors_batch(forest, forest.cmesh_for(tree), tree,
                                     Elements.from_keys([key]), face)
    out = []
    for groups in per_child:
        for g in groups:
            out.append((g.elements.key(0), g.tree, int(g.dual[0])))
    return out


# ---------------------------------------------------------------------------
# Owners at a face


def _face_owner_bounds(forest: Forest, tree: int, elems: Elements, face, lo=None, hi=None):
    sch = forest.scheme(tree)
    first = sch.first_face_descendant(elems, face)
    last = sch.last_face_descendant(elems, face)
    return (forest.owner_of_lids(tree, sch.linear_id(first), lo, hi),
            forest.owner_of_lids(tree, sch.linear_id(last), lo, hi))


def _owners_at_face_rec(forest, tree, elem: Elements, face: int, lo: int, hi: int,
                        out: set) -> None:
    pf, pl = _face_owner_bounds(forest, tree, elem, face, lo, hi)
    pf, pl = int(pf[0]), int(pl[0])
    if pl - pf <= 1 or int(elem.level[0]) >= forest.max_level:
        out.update((pf, pl))
        return
    sch = forest.scheme(tree)
    for ci in sch.children_at_face(elem, face)[0]:
        kid = sch.child(elem, ci)
        cf = int(sch.child_face(elem, ci, face)[0])
        _owners_at_face_rec(forest, tree, kid, cf, pf, pl, out)


def owners_at_face_batch(forest: Forest, tree: int, elems: Elements, face) -> list[set]:
    """Ranks owning leaves that touch ``face`` of each element."""
    n = len(elems)
    f = np.broadcast_to(np.asarray(face, np.int64), (n,))
    pf, pl = _face_owner_bounds(forest, tree, elems, f)
    out = [{int(a), int(b)} for a, b in zip(pf, pl)]
    for i in np.flatnonzero(pl - pf > 1):
        s: set = set()
        _owners_at_face_rec(forest, tree, elems[int(i)], int(f[i]), int(pf[i]), int(pl[i]), s)
        out[i] = s
    return out


def owners_at_face(forest: Forest, tree: int, key: ElementKey, face: int) -> set[int]:
    return owners_at_face_batch(forest, tree, Elements.from_keys([key]), face)[0]


# ---------------------------------------------------------------------------
# Search


def split_array(scheme: Scheme, elem: Elements, lids: np.ndarray) -> np.ndarray:
    """Bounds splitting SFC-sorted leaf ids inside ``elem`` among its children.

    Returns ``2^d + 1`` offsets; child i holds ``lids[b[i]:b[i+1]]``.
    """
    kids = scheme.children(elem)
    starts = scheme.linear_id(kids)
    bounds = np.searchsorted(lids, starts, "left")
    bounds[0] = 0
    return np.concatenate([bounds, [len(lids)]])


MatchFunction = Callable[[int, Elements, np.ndarray, np.ndarray], np.ndarray]


def search(forest: Forest, rank: int, match: MatchFunction) -> int:
    """Top-down traversal of each local tree, pruned by ``match``.

    ``match(tree, elements, is_leaf, leaf_index)`` is called on batches of
    one tree level by level and returns a bool array; the traversal
    descends into elements where it is true.  ``leaf_index`` is the local
    leaf index for leaves and -1 otherwise.  Returns the number of visits.
    """
    visits = 0
    for t, a, b, leaves in forest.iter_trees(rank):
        sch = forest.scheme(t)
        lids = forest.lids[rank][a:b]
        start = sch.nca(leaves[[0]], leaves[[b - a - 1]])
        frontier = (start, np.array([0]), np.array([b - a]))
        while len(frontier[0]):
            elems, lo, hi = frontier
            is_leaf = (hi - lo == 1) & leaves[lo].equal(elems)
            leaf_index = np.where(is_leaf, a + lo, -1)
            keep = np.asarray(match(t, elems, is_leaf, leaf_index), bool)
            visits += len(elems)
            go = np.flatnonzero(keep & ~is_leaf)
            if not len(go):
                break
            parents = elems[go]
            kids = sch.children(parents)
            starts = sch.linear_id(kids).reshape(len(go), -1)
            nc = starts.shape[1]
            k_lo = np.empty((len(go), nc), np.int64)
            for j, g in enumerate(go):
                # split_array on the leaf range of this element
                sub = lids[lo[g]:hi[g]]
                bnd = np.searchsorted(sub, starts[j], "left")
                bnd[0] = 0
                k_lo[j] = lo[g] + bnd
            k_hi = np.concatenate([k_lo[:, 1:], hi[go][:, None]], axis=1)
            k_lo, k_hi = k_lo.ravel(), k_hi.ravel()
            nonempty = k_hi > k_lo
            frontier = (kids[np.flatnonzero(nonempty)], k_lo[nonempty], k_hi[nonempty])
    return visits


# ---------------------------------------------------------------------------
# Ghost layers


def _boundary_sets_v2(forest: Forest, p: int, only=None) -> dict[int, set]:
    """Remote ranks per local leaf index via owners at the neighbor face."""
    remotes: dict[int, set] = {}
    cmesh = forest.cmeshes[p]
    for t, a, b, leaves in forest.iter_trees(p):
        sub = np.arange(a, b) if only is None else only[(only >= a) & (only < b)]
        if not len(sub):
            continue
        elems = forest.leafsets[p].take(sub)
        elems = Elements(forest.tree_class(t), elems.coords, elems.level, elems.btype)
        for f in range(forest.tree_class(t).num_faces):
            for grp in face_neighbors(forest, cmesh, t, elems, f):
                sets = owners_at_face_batch(forest, grp.tree, grp.elements, grp.dual)
                for i, s in zip(grp.index, sets):
                    s = s - {p}
                    if s:
                        remotes.setdefault(int(sub[i]), set()).update(s)
    return remotes


def _boundary_sets_v1(forest: Forest, p: int) -> dict[int, set]:
    """Remote ranks via owners of half-face neighbors (balanced forests)."""
    remotes: dict[int, set] = {}
    cmesh = forest.cmeshes[p]
    L = forest.max_level
    for t, a, b, leaves in forest.iter_trees(p):
        fine = np.flatnonzero(leaves.level < L)
        top = np.flatnonzero(leaves.level >= L)
        for f in range(forest.tree_class(t).num_faces):
            batches = []
            if len(fine):
                for groups in half_neighbors_batch(forest, cmesh, t, leaves[fine], f):
                    batches.extend((fine[g.index], g) for g in groups)
            if len(top):
                batches.extend((top[g.index], g)
                               for g in face_neighbors(forest, cmesh, t, leaves[top], f))
            for idx, g in batches:
                q = forest.owner_of_lids(g.tree, forest.scheme(g.tree).linear_id(g.elements))
                for i, r in zip(idx, q):
                    if r != p:
                        remotes.setdefault(a + int(i), set()).add(int(r))
    return remotes


def _boundary_sets_v3(forest: Forest, p: int) -> dict[int, set]:
    """Search-pruned traversal; leaves reached are handled like v2."""
    cmesh = forest.cmeshes[p]
    reached: list[np.ndarray] = []

    def match(tree, elems, is_leaf, leaf_index):
        keep = np.ones(len(elems), bool)
        reached.append(leaf_index[is_leaf])
        inner = np.flatnonzero(~is_leaf)
        if not len(inner):
            return keep
        sub = elems[inner]
        pf, pl = owner_range_batch(forest, tree, sub)
        # a subtree without leaves of p is kept (descended), as in the listing
        remote_face = np.zeros(len(inner), bool)
        for f in range(forest.tree_class(tree).num_faces):
            for grp in face_neighbors(forest, cmesh, tree, sub, f):
                qf, ql = _face_owner_bounds(forest, grp.tree, grp.elements, grp.dual)
                remote_face[grp.index] |= (qf != p) | (ql != p)
        prune = (pf == p) & (pl == p) & ~remote_face
        keep[inner] = ~prune
        return keep

    search(forest, p, match)
    hit = np.unique(np.concatenate(reached)) if reached else np.zeros(0, np.int64)
    return _boundary_sets_v2(forest, p, only=hit)


def boundary_sets(forest: Forest, p: int, version: str = "v2") -> dict[int, np.ndarray]:
    """R_p^q: sorted local leaf indices per remote rank q."""
    if version not in ("v1", "v2", "v3"):
        raise ValueError(f"unknown ghost version {version!r}")
    if forest.num_ranks == 1:
        # no remote rank can own a neighbor
        return {}
    if version == "v1":
        per_leaf = _boundary_sets_v1(forest, p)
    elif version == "v2":
        per_leaf = _boundary_sets_v2(forest, p)
    elif version == "v3":
        per_leaf = _boundary_sets_v3(forest, p)
    else:
        raise ValueError(f"unknown ghost version {version!r}")
    out: dict[int, list] = {}
    for i in sorted(per_leaf):
        for q in per_leaf[i]:
            out.setdefault(q, []).append(i)
    return {q: np.array(v, np.int64) for q, v in sorted(out.items())}


def ghost(forest: Forest, version: str = "v2") -> Forest:
    """Snapshot with a ghost layer built by the chosen algorithm.

    v1 requires a balanced forest.
    """
    if version == "v1" and not is_balanced(forest):
        raise ValueError("ghost v1 needs a 2:1 balanced forest")
    P = forest.num_ranks
    sets = [boundary_sets(forest, p, version) for p in range(P)]
    layers: list[GhostLayer | None] = [None] * P

    def outgoing(rank, state):
        ls = forest.leafsets[rank]
        return {q: ls.take(idx) for q, idx in sets[rank].items()}

    def incoming(rank, state, got):
        parts, owners = [], []
        for q in sorted(got):
            parts.append(got[q])
            owners.append(np.full(len(got[q]), q, np.int64))
        leaves = LeafSet.concat(parts, forest.dim)
        own = np.concatenate(owners) if owners else np.zeros(0, np.int64)
        layers[rank] = GhostLayer(sets[rank], leaves, own, forest._linear_ids(leaves),
                                  leaves.tree_ranges())
        return state

    exchange(forest.world, outgoing, "ghost", incoming)
    return forest._with(ghosts=layers)


def _ensure_ghosts(forest: Forest) -> Forest:
    if forest.ghosts is None:
        return ghost(forest, "v2")
    return forest


# ---------------------------------------------------------------------------
# Descendant lookups and balance


def _strict_desc_in(lids, levels, query_lid, query_level, last_lid) -> np.ndarray:
    """True where a stored leaf L satisfies sfc(E) < sfc(L) <= sfc(D)."""
    if not len(lids):
        return np.zeros(len(query_lid), bool)
    pos = np.searchsorted(lids, last_lid, "right") - 1
    ok = pos >= 0
    pos = np.clip(pos, 0, None)
    cand_lid, cand_level = lids[pos], levels[pos]
    after = (cand_lid > query_lid) | ((cand_lid == query_lid) & (cand_level > query_level))
    return ok & after


def leaf_desc_exists(forest: Forest, rank: int, tree: int, elems: Elements) -> np.ndarray:
    """Whether a local or ghost leaf is a strict descendant of each element."""
    sch = forest.scheme(tree)
    qlid = sch.linear_id(elems)
    dlid = sch.linear_id(sch.last_descendant(elems))
    a, b = forest.ranges[rank].get(tree, (0, 0))
    ls = forest.leafsets[rank]
    found = _strict_desc_in(forest.lids[rank][a:b], ls.level[a:b], qlid, elems.level, dlid)
    if forest.ghosts is not None:
        gl = forest.ghosts[rank]
        ga, gb = gl.tree_ranges.get(tree, (0, 0))
        found |= _strict_desc_in(gl.lids[ga:gb], gl.leaves.level[ga:gb], qlid, elems.level, dlid)
    return found


def _unbalanced_leaves(forest: Forest, p: int) -> np.ndarray:
    """Local leaves with a half-face neighbor that has a strict leaf descendant."""
    cmesh = forest.cmeshes[p]
    flags = np.zeros(forest.local_count(p), bool)
    for t, a, b, leaves in forest.iter_trees(p):
        fine = np.flatnonzero(leaves.level < forest.max_level)
        if not len(fine):
            continue
        for f in range(forest.tree_class(t).num_faces):
            for groups in half_neighbors_batch(forest, cmesh, t, leaves[fine], f):
                for g in groups:
                    hit = leaf_desc_exists(forest, p, g.tree, g.elements)
                    flags[a + fine[g.index[hit]]] = True
    return flags


def is_balanced(forest: Forest) -> bool:
    """True iff face-neighboring leaves differ by at most one level."""
    forest = _ensure_ghosts(forest) if forest.num_ranks > 1 else forest
    flags = [not _unbalanced_leaves(forest, p).any() for p in range(forest.num_ranks)]
    return all_reduce_and(forest.world, flags)


def _balance(forest: Forest, repartition_each_round: bool, version: str, data):
    rounds = 0
    while True:
        if repartition_each_round:
            new = partition(forest)
            if data is not None:
                data = partition_data(forest, new, data)
            forest = new
        forest = ghost(forest, version)
        flags = [_unbalanced_leaves(forest, p) for p in range(forest.num_ranks)]
        rounds += 1
        if all_reduce_and(forest.world, [not f.any() for f in flags]):
            forest.balance_rounds = rounds
            return forest, data
        new = _adapt_with_flags(forest, [f.astype(np.int64) for f in flags])
        if data is not None:
            data = interpolate_data(forest, new, data)
        forest = new


def balance_ripple(forest: Forest, repartition_each_round: bool = False,
                   ghost_version: str = "v2") -> Forest:
    """Refine until every pair of face-neighboring leaves is 2:1 balanced."""
    return _balance(forest, repartition_each_round, ghost_version, None)[0]


def balance_ripple_with_data(forest: Forest, data: list[np.ndarray],
                             repartition_each_round: bool = False, ghost_version: str = "v2"):
    """Balance and carry element data along each refinement round."""
    return _balance(forest, repartition_each_round, ghost_version, data)


# ---------------------------------------------------------------------------
# Fetching records by global leaf index


def _concat_records(parts: list[dict], template: dict) -> dict:
    if not parts:
        return {k: v[:0] for k, v in template.items()}
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _fetch(world: RankWorld, offsets: np.ndarray, wanted: list[np.ndarray],
           provide: Callable[[int, np.ndarray], dict], template: dict, tag: str) -> list[dict]:
    """Records for sorted global indices ``wanted[p]`` held by other ranks.

    ``provide(rank, local_indices)`` returns a dict of equally long arrays.
    """
    P = world.size
    requests = []
    for p in range(P):
        w = np.asarray(wanted[p], np.int64)
        owners = np.searchsorted(offsets, w, "right") - 1
        req = {}
        for q in np.unique(owners):
            if q == p:
                raise ValueError("rank fetching its own records")
            req[int(q)] = w[owners == q] - offsets[q]
        requests.append(req)
    replies: list[dict] = [{} for _ in range(P)]

    def answer(rank, state, got):
        replies[rank] = {q: provide(rank, idx) for q, idx in got.items()}
        return state

    exchange(world, lambda r, s: requests[r], tag + "_request", answer)
    results: list[dict] = [{} for _ in range(P)]

    def collect(rank, state, got):
        results[rank] = _concat_records([got[q] for q in sorted(got)], template)
        return state

    exchange(world, lambda r, s: replies[r], tag + "_reply", collect)
    return results


# ---------------------------------------------------------------------------
# Adaptation


AdaptCallback = Callable[[int, Elements, Scheme], np.ndarray]


@dataclass
class _Work:
    """Mutable per-rank leaf list during one adapt call."""

    leaves: LeafSet
    flag: np.ndarray        # callback result per leaf
    refined: np.ndarray     # created by refinement in this call
    coarsened: np.ndarray   # created by coarsening in this call
    src_first: np.ndarray   # provenance: first old global index
    src_count: np.ndarray


def _children_of(forest: Forest, ls: LeafSet, idx: np.ndarray) -> LeafSet:
    parts = []
    for t in np.unique(ls.tree[idx]):
        sel = idx[ls.tree[idx] == t]
        sch = forest.scheme(int(t))
        kids = sch.children(Elements(sch.eclass, ls.coords[sel], ls.level[sel], ls.btype[sel]))
        parts.append(LeafSet.from_elements(int(t), kids))
    # trees ascend and idx is sorted, so the concatenation is in leaf order
    return LeafSet.concat(parts, forest.dim)


def _evaluate(forest: Forest, callback: AdaptCallback, ls: LeafSet) -> np.ndarray:
    out = np.zeros(len(ls), np.int64)
    for t, (a, b) in ls.tree_ranges().items():
        sch = forest.scheme(t)
        res = np.asarray(callback(t, ls.elements(sch.eclass, a, b), sch), np.int64)
        out[a:b] = np.broadcast_to(res, (b - a,))
    return out


def _refine_pass(forest: Forest, w: _Work, callback: AdaptCallback | None,
                 warnings: list) -> _Work:
    """Replace flagged leaves by children; recurse when ``callback`` is given."""
    L = forest.max_level
    while True:
        want = (w.flag > 0) & ~w.coarsened
        at_max = want & (w.leaves.level >= L)
        if at_max.any():
            warnings.append(f"{int(at_max.sum())} refinement request(s) beyond "
                            f"level {L} kept as is")
        go = np.flatnonzero(want & ~at_max)
        if not len(go):
            return w
        m = forest.tree_class(int(w.leaves.tree[go[0]])).num_children
        kids = _children_of(forest, w.leaves, go)
        kid_flag = (_evaluate(forest, callback, kids) if callback is not None
                    else np.zeros(len(kids), np.int64))
        n = len(w.leaves)
        sizes = np.ones(n, np.int64)
        sizes[go] = m
        start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        keep = np.setdiff1d(np.arange(n), go)
        pos_keep = start[keep]
        pos_kid = (start[go][:, None] + np.arange(m)).ravel()
        rep = np.repeat(go, m)

        def merge(old, new):
            out = np.empty((total,) + old.shape[1:], old.dtype)
            out[pos_keep] = old[keep]
            out[pos_kid] = new
            return out

        ls = w.leaves
        leaves = LeafSet(merge(ls.tree, kids.tree), merge(ls.coords, kids.coords),
                         merge(ls.level, kids.level), merge(ls.btype, kids.btype))
        flag = merge(np.where(np.isin(np.arange(n), go), 0, w.flag), kid_flag)
        w = _Work(leaves, flag, merge(w.refined, np.ones(len(kids), bool)),
                  merge(w.coarsened, np.zeros(len(kids), bool)),
                  merge(w.src_first, w.src_first[rep]), merge(w.src_count, w.src_count[rep]))
        if callback is None:
            w.flag[:] = 0
            return w


def _family_starts(forest: Forest, trees, coords, level, btype, eligible) -> np.ndarray:
    """Indices s where s..s+m-1 are a complete family of eligible members."""
    n = len(level)
    out = []
    if not n:
        return np.zeros(0, np.int64)
    cut = np.flatnonzero(np.diff(trees)) + 1
    for a, b in zip(np.concatenate([[0], cut]), np.concatenate([cut, [n]])):
        t = int(trees[a])
        sch = forest.scheme(t)
        m = sch.num_children
        if b - a < m:
            continue
        lv = level[a:b]
        pos = np.flatnonzero(lv > 0)
        elems = Elements(sch.eclass, coords[a:b], lv, btype[a:b])
        cid = np.full(b - a, -1, np.int64)
        cid[pos] = sch.child_id(elems[pos])
        par = np.zeros((b - a, coords.shape[1] + 2), np.int64) - 1
        pe = sch.parent(elems[pos])
        par[pos] = np.concatenate([pe.coords, pe.level[:, None], pe.btype[:, None]], axis=1)
        cand = np.flatnonzero((cid[:b - a - m + 1] == 0) & eligible[a:b - m + 1])
        ok = np.ones(len(cand), bool)
        for j in range(1, m):
            ok &= (par[cand + j] == par[cand]).all(axis=1) & eligible[a + cand + j]
            ok &= cid[cand + j] == j
        out.append(a + cand[ok])
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def _coarsen_round(forest: Forest, works: list[_Work], callback, recursive_round: bool,
                   offsets_tag: str) -> tuple[list[_Work], list[bool]]:
    """One global coarsening sweep with a window exchange at rank borders."""
    world = forest.world
    P = world.size
    d = forest.dim
    if recursive_round:
        for w in works:
            fresh = w.coarsened & (w.flag == 0)
            if fresh.any():
                w.flag[fresh] = _evaluate(forest, callback, w.leaves.take(np.flatnonzero(fresh)))
    counts = allgather(world, [len(w.leaves) for w in works], offsets_tag)[0]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    N = int(offsets[-1])
    m = 1 << d
    wanted = []
    for p in range(P):
        a, b = offsets[p], offsets[p + 1]
        if a == b:
            wanted.append(np.zeros(0, np.int64))
            continue
        before = np.arange(max(0, a - (m - 1)), a)
        after = np.arange(b, min(N, b + m - 1))
        wanted.append(np.concatenate([before, after]).astype(np.int64))

    def provide(rank, idx):
        w = works[rank]
        ls = w.leaves
        return {"tree": ls.tree[idx], "coords": ls.coords[idx], "level": ls.level[idx],
                "btype": ls.btype[idx], "flag": w.flag[idx],
                "eligible": ~w.refined[idx], "src_first": w.src_first[idx],
                "src_count": w.src_count[idx]}

    z = np.zeros(0, np.int64)
    template = {"tree": z, "coords": np.zeros((0, d), np.int64), "level": z, "btype": z,
                "flag": z, "eligible": np.zeros(0, bool), "src_first": z, "src_count": z}
    windows = _fetch(world, offsets, wanted, provide, template, "adapt_window")
    changed = []
    new_works = []
    for p in range(P):
        w = works[p]
        a, b = int(offsets[p]), int(offsets[p + 1])
        if a == b:
            new_works.append(w)
            changed.append(False)
            continue
        win = windows[p]
        gidx = wanted[p]
        nb = int((gidx < a).sum())
        ls = w.leaves
        seq = {
            "tree": np.concatenate([win["tree"][:nb], ls.tree, win["tree"][nb:]]),
            "coords": np.concatenate([win["coords"][:nb], ls.coords, win["coords"][nb:]]),
            "level": np.concatenate([win["level"][:nb], ls.level, win["level"][nb:]]),
            "btype": np.concatenate([win["btype"][:nb], ls.btype, win["btype"][nb:]]),
            "flag": np.concatenate([win["flag"][:nb], w.flag, win["flag"][nb:]]),
            "eligible": np.concatenate([win["eligible"][:nb], ~w.refined, win["eligible"][nb:]]),
            "src_first": np.concatenate([win["src_first"][:nb], w.src_first, win["src_first"][nb:]]),
            "src_count": np.concatenate([win["src_count"][:nb], w.src_count, win["src_count"][nb:]]),
        }
        eligible = seq["eligible"] & (seq["flag"] < 0)
        starts = _family_starts(forest, seq["tree"], seq["coords"], seq["level"],
                                seq["btype"], eligible)
        local_lo, local_hi = nb, nb + len(ls)
        starts = starts[(starts + m > local_lo) & (starts < local_hi)]
        if not len(starts):
            new_works.append(w)
            changed.append(False)
            continue
        drop = np.zeros(len(ls), bool)
        emit_at = []
        for s in starts:
            members = np.arange(s, s + m) - nb
            drop[members[(members >= 0) & (members < len(ls))]] = True
            if s >= local_lo:
                emit_at.append(int(s))
        keep_idx = np.flatnonzero(~drop)
        emit_at = np.array(emit_at, np.int64)
        parents = []
        for s in emit_at:
            t = int(seq["tree"][s])
            sch = forest.scheme(t)
            child = Elements(sch.eclass, seq["coords"][[s]], seq["level"][[s]], seq["btype"][[s]])
            parents.append(LeafSet.from_elements(t, sch.parent(child)))
        par = LeafSet.concat(parents, d)
        # leaf order: kept leaves by local position, parents at their first member
        key_keep = keep_idx.astype(float)
        key_par = (emit_at - nb).astype(float)
        order = np.argsort(np.concatenate([key_keep, key_par]), kind="stable")
        src_first = np.concatenate([w.src_first[keep_idx], seq["src_first"][emit_at]])
        src_count = np.concatenate([
            w.src_count[keep_idx],
            np.array([int(seq["src_count"][s:s + m].sum()) for s in emit_at], np.int64)])
        leaves = LeafSet.concat([ls.take(keep_idx), par], d)
        leaves = leaves.take(order) if len(leaves) else leaves
        flag = np.concatenate([w.flag[keep_idx], np.zeros(len(par), np.int64)])[order]
        refined = np.concatenate([w.refined[keep_idx], np.zeros(len(par), bool)])[order]
        coarsened = np.concatenate([w.coarsened[keep_idx], np.ones(len(par), bool)])[order]
        new_works.append(_Work(leaves, flag, refined, coarsened, src_first[order], src_count[order]))
        changed.append(True)
    return new_works, changed


def _initial_work(forest: Forest, p: int, flag: np.ndarray) -> _Work:
    n = forest.local_count(p)
    return _Work(forest.leafsets[p], np.asarray(flag, np.int64).copy(), np.zeros(n, bool),
                 np.zeros(n, bool), forest.element_offsets[p] + np.arange(n, dtype=np.int64),
                 np.ones(n, np.int64))


def _finish_adapt(forest: Forest, works: list[_Work], warnings: list) -> Forest:
    source = [(w.src_first, w.src_count) for w in works]
    return _assemble(forest, [w.leaves for w in works], source=source,
                     source_generation=forest.generation, warnings=warnings)


def adapt(forest: Forest, callback: AdaptCallback, recursive: bool = False) -> Forest:
    """Refine (>0), coarsen (<0, complete families only) or keep (0) leaves.

    ``callback(tree, elements, scheme)`` returns one integer per element.
    A family is coarsened when all of its members ask for it; families that
    straddle rank borders are decided identically by all ranks involved.
    In recursive mode new children are offered for refinement again and new
    parents for coarsening again; refined elements are not coarsened and
    coarsened ones are not refined within the same call.
    """
    warnings: list[str] = []
    works = [_initial_work(forest, p, _evaluate(forest, callback, forest.leafsets[p]))
             for p in range(forest.num_ranks)]
    works, changed = _coarsen_round(forest, works, callback, False, "adapt_counts")
    works = [_refine_pass(forest, w, callback if recursive else None, warnings) for w in works]
    while recursive and not all_reduce_and(forest.world, [not c for c in changed]):
        works, changed = _coarsen_round(forest, works, callback, True, "adapt_counts")
    return _finish_adapt(forest, works, sorted(set(warnings)))


def adapt_by_flags(forest: Forest, flags: list[np.ndarray]) -> Forest:
    """Non-recursive adapt driven by one precomputed flag per local leaf.

    Same family rule as :func:`adapt`; useful when the decision depends on
    element data rather than on the element alone.
    """
    if len(flags) != forest.num_ranks or any(len(f) != forest.local_count(p)
                                             for p, f in enumerate(flags)):
        raise ValueError("one flag per local leaf on every rank")
    warnings: list[str] = []
    works = [_initial_work(forest, p, flags[p]) for p in range(forest.num_ranks)]
    works, _ = _coarsen_round(forest, works, None, False, "adapt_counts")
    works = [_refine_pass(forest, w, None, warnings) for w in works]
    return _finish_adapt(forest, works, sorted(set(warnings)))


def _adapt_with_flags(forest: Forest, flags: list[np.ndarray]) -> Forest:
    """Non-recursive refinement driven by precomputed per-leaf flags."""
    warnings: list[str] = []
    works = [_refine_pass(forest, _initial_work(forest, p, flags[p]), None, warnings)
             for p in range(forest.num_ranks)]
    return _finish_adapt(forest, works, sorted(set(warnings)))


# ---------------------------------------------------------------------------
# Partition


def _cut_points(N: int, P: int) -> np.ndarray:
    return np.array([(p * N) // P for p in range(P + 1)], np.int64)


def _move_records(world: RankWorld, old_offsets, new_offsets, local: list, take, join, tag):
    """Send global index ranges from old to new owners."""
    P = world.size
    result = [None] * P

    def outgoing(rank, state):
        a, b = old_offsets[rank], old_offsets[rank + 1]
        msgs = {}
        for q in range(P):
            lo, hi = max(a, new_offsets[q]), min(b, new_offsets[q + 1])
            if hi > lo and q != rank:
                msgs[q] = take(local[rank], np.arange(lo - a, hi - a))
        return msgs

    def incoming(rank, state, got):
        a, b = old_offsets[rank], old_offsets[rank + 1]
        lo, hi = max(a, new_offsets[rank]), min(b, new_offsets[rank + 1])
        pieces = dict(got)
        if hi > lo:
            pieces[rank] = take(local[rank], np.arange(lo - a, hi - a))
        result[rank] = join([pieces[q] for q in sorted(pieces)])
        return state

    exchange(world, outgoing, tag, incoming)
    return result


def partition(forest: Forest, cuts=None) -> Forest:
    """Redistribute leaves so rank p holds global leaves floor(pN/P)..floor((p+1)N/P)-1.

    ``cuts`` (P+1 nondecreasing global indices from 0 to N) overrides the
    uniform cut points, e.g. for weighted or randomized partitions.
    """
    P = forest.num_ranks
    if cuts is None:
        new_offsets = _cut_points(forest.num_leaves, P)
    else:
        new_offsets = np.asarray(cuts, np.int64)
        if (len(new_offsets) != P + 1 or new_offsets[0] != 0
                or new_offsets[-1] != forest.num_leaves or np.any(np.diff(new_offsets) < 0)):
            raise ValueError("cuts must be P+1 nondecreasing indices from 0 to N")
    if np.array_equal(new_offsets, forest.element_offsets):
        return forest
    d = forest.dim
    leafsets = _move_records(forest.world, forest.element_offsets, new_offsets,
                             forest.leafsets, lambda ls, idx: ls.take(idx),
                             lambda parts: LeafSet.concat(parts, d), "partition")
    return _assemble(forest, leafsets, element_offsets=new_offsets)


# ---------------------------------------------------------------------------
# Element data services


def _local_rows(forest: Forest, data: list[np.ndarray]) -> list[np.ndarray]:
    if len(data) != forest.num_ranks:
        raise ValueError("one data array per rank")
    out = []
    for p, arr in enumerate(data):
        n = forest.local_count(p)
        allowed = {n, n + forest.ghost_count(p)}
        if len(arr) not in allowed:
            raise ValueError(f"rank {p}: data has {len(arr)} rows, expected {sorted(allowed)}")
        out.append(np.asarray(arr)[:n])
    return out


def ghost_exchange(forest: Forest, data: list[np.ndarray]) -> list[np.ndarray]:
    """Overwrite ghost rows with the owners' records."""
    if forest.ghosts is None:
        raise ValueError("forest has no ghost layer")
    out = []
    for p, arr in enumerate(data):
        n, g = forest.local_count(p), forest.ghost_count(p)
        arr = np.asarray(arr)
        if len(arr) == n:
            arr = np.concatenate([arr, np.zeros((g,) + arr.shape[1:], arr.dtype)])
        if len(arr) != n + g:
            raise ValueError(f"rank {p}: data has {len(arr)} rows, expected {n + g}")
        out.append(arr.copy())

    def outgoing(rank, state):
        return {q: out[rank][idx] for q, idx in forest.ghosts[rank].remotes.items()}

    def incoming(rank, state, got):
        n = forest.local_count(rank)
        owners = forest.ghosts[rank].owners
        for q, rows in got.items():
            where = np.flatnonzero(owners == q)
            out[rank][n + where] = rows
        return state

    exchange(forest.world, outgoing, "ghost_data", incoming)
    return out


def partition_data(old: Forest, new: Forest, data: list[np.ndarray]) -> list[np.ndarray]:
    """Move local records so record i of the global order follows leaf i."""
    if old.num_leaves != new.num_leaves:
        raise ValueError("forests differ in leaf count")
    rows = _local_rows(old, data)
    if np.array_equal(old.element_offsets, new.element_offsets):
        return [r.copy() for r in rows]
    template = rows[0]
    return _move_records(old.world, old.element_offsets, new.element_offsets, rows,
                         lambda arr, idx: arr[idx],
                         lambda parts: np.concatenate(parts) if parts else template[:0],
                         "partition_data")


def interpolate_data(old: Forest, new: Forest, data: list[np.ndarray],
                     average_mode: str = "mean") -> list[np.ndarray]:
    """Carry records across one adapt: copy to children, average on coarsening.

    ``average_mode`` is ``"mean"`` (arithmetic mean of the children) or
    ``"volume"`` (volume-weighted; equal to the mean for equal child volumes).
    """
    if new.source is None or new.source_generation != old.generation:
        raise ValueError("new forest was not adapted from this forest")
    if average_mode not in ("mean", "volume"):
        raise ValueError(f"unknown average mode {average_mode!r}")
    rows = _local_rows(old, data)
    P = old.num_ranks
    offsets = old.element_offsets
    need = []
    for p in range(P):
        first, count = new.source[p]
        idx = np.unique(np.concatenate([np.arange(f, f + c) for f, c in zip(first, count)])
                        if len(first) else np.zeros(0, np.int64))
        a, b = offsets[p], offsets[p + 1]
        need.append(idx[(idx < a) | (idx >= b)].astype(np.int64))
    template = {"value": rows[0][:0], "level": np.zeros(0, np.int64)}

    def provide(rank, idx):
        return {"value": rows[rank][idx], "level": old.leafsets[rank].level[idx]}

    remote = _fetch(old.world, offsets, need, provide, template, "interpolate")
    out = []
    d = old.dim
    for p in range(P):
        a, b = int(offsets[p]), int(offsets[p + 1])
        first, count = new.source[p]
        gidx = np.concatenate([np.arange(a, b), need[p]])
        vals = np.concatenate([rows[p], remote[p]["value"]])
        lev = np.concatenate([old.leafsets[p].level, remote[p]["level"]])
        order = np.argsort(gidx, kind="stable")
        gidx, vals, lev = gidx[order], vals[order], lev[order]
        new_level = new.leafsets[p].level
        res = np.empty((len(first),) + rows[p].shape[1:], rows[p].dtype)
        single = count == 1
        pos = np.searchsorted(gidx, first)
        jump = new_level[single] - lev[pos[single]]
        if np.any((jump < 0) | (jump > 1)):
            raise ValueError("level jump outside {-1, 0, +1} between aligned leaves")
        res[single] = vals[pos[single]]
        for i in np.flatnonzero(~single):
            sl = slice(pos[i], pos[i] + count[i])
            if np.any(lev[sl] - new_level[i] != 1):
                raise ValueError("level jump outside {-1, 0, +1} between aligned leaves")
            if average_mode == "mean":
                res[i] = vals[sl].mean(axis=0)
            else:
                w = 2.0 ** (-d * lev[sl].astype(float))
                res[i] = np.tensordot(w, vals[sl], axes=1) / w.sum()
        out.append(res)
    return out


# ---------------------------------------------------------------------------
# Geometry


def reference_to_physical(eclass: ElementClass, vertices: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Affine map of reference points (k, d) into a tree with given vertices."""
    v = np.asarray(vertices, float)
    ref = np.asarray(ref, float)
    if eclass == ElementClass.TRIANGLE:
        cols = [v[1] - v[0], v[2] - v[1]]
    elif eclass == ElementClass.TET:
        cols = [v[1] - v[0], v[3] - v[2], v[2] - v[1]]
    else:
        cols = [v[1 << a] - v[0] for a in range(eclass.dim)]
    # explicit column sum: results per point do not depend on the batch size
    out = np.broadcast_to(v[0], ref.shape[:-1] + v[0].shape).copy()
    for a, col in enumerate(cols):
        out += ref[..., a:a + 1] * col
    return out


def element_vertices(forest: Forest, cmesh: CoarseMesh, tree: int, elems: Elements) -> np.ndarray:
    """Physical vertex coordinates, shape (n, vertices per element, dim)."""
    sch = forest.scheme(tree)
    lattice = sch.vertices(elems).astype(float) / sch.root_len
    verts = cmesh.tree_vertices(tree)
    flat = reference_to_physical(sch.eclass, verts, lattice.reshape(-1, sch.dim))
    return flat.reshape(lattice.shape[0], lattice.shape[1], -1)


# ---------------------------------------------------------------------------
# Reporting


def stats_rows(forest: Forest) -> list[dict]:
    """Per-rank leaves, ghosts, and messages/bytes sent so far on the world."""
    sent = np.zeros(forest.num_ranks, np.int64)
    nbytes = np.zeros(forest.num_ranks, np.int64)
    for rec in forest.world.trace:
        sent[rec.sender] += 1
        nbytes[rec.sender] += rec.nbytes
    return [{"rank": p, "leaves": forest.local_count(p), "ghosts": forest.ghost_count(p),
             "messages": int(sent[p]), "bytes": int(nbytes[p])}
            for p in range(forest.num_ranks)]


_VTK_CELL = {ElementClass.LINE: (3, None), ElementClass.QUAD: (9, [0, 1, 3, 2]),
             ElementClass.TRIANGLE: (5, None), ElementClass.HEX: (12, [0, 1, 3, 2, 4, 5, 7, 6]),
             ElementClass.TET: (10, None)}


def write_vtk(forest: Forest, path, field: list[np.ndarray] | None = None,
              name: str = "value") -> None:
    """Legacy ASCII VTK of all leaves with an optional scalar cell field."""
    points, cells, types, values = [], [], [], []
    count = 0
    for p in range(forest.num_ranks):
        cmesh = forest.cmeshes[p]
        for t, a, b, elems in forest.iter_trees(p):
            verts = element_vertices(forest, cmesh, t, elems)
            ctype, perm = _VTK_CELL[forest.tree_class(t)]
            for i in range(len(elems)):
                vv = verts[i] if perm is None else verts[i][perm]
                vv = np.pad(vv, ((0, 0), (0, 3 - vv.shape[1])))
                points.extend(vv)
                cells.append(list(range(count, count + len(vv))))
                count += len(vv)
                types.append(ctype)
            if field is not None:
                values.extend(np.asarray(field[p])[a:b].tolist())
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nforest leaves\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points)} double\n")
        for pt in points:
            fh.write(" ".join(f"{x:.17g}" for x in pt) + "\n")
        size = sum(len(c) + 1 for c in cells)
        fh.write(f"CELLS {len(cells)} {size}\n")
        for c in cells:
            fh.write(" ".join(map(str, [len(c)] + c)) + "\n")
        fh.write(f"CELL_TYPES {len(types)}\n")
        fh.write("\n".join(map(str, types)) + "\n")
        if field is not None:
            fh.write(f"CELL_DATA {len(values)}\nSCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(f"{v:.17g}" for v in values) + "\n")
