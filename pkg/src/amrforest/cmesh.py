"""Partitioned coarse meshes: trees, face connectivity, offsets and repartitioning.

Trees are numbered globally ``0..K-1``.  A rank stores its local trees (a
consecutive id range, possibly sharing the first and last tree with other
ranks) and ghost trees, the nonlocal face neighbors of its local trees.

Per face a local tree stores a neighbor index and an encoded connection
``orientation * F + dual_face`` where ``F`` is 2, 4 or 6 in 1D, 2D or 3D.  The
neighbor index is local: values below ``n_p`` are local trees, larger values
are ghosts.  A face glued to itself marks the domain boundary.  Ghosts store
the global ids of all their neighbors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .element_schemes import FACE_VERTICES, ElementClass
from .vranks import RankWorld

FACE_CODE_BASE = {1: 2, 2: 4, 3: 6}

CLASS_NAMES = {
    ElementClass.LINE: "line",
    ElementClass.QUAD: "quad",
    ElementClass.HEX: "hex",
    ElementClass.TRIANGLE: "triangle",
    ElementClass.TET: "tet",
}
CLASS_BY_NAME = {name: cls for cls, name in CLASS_NAMES.items()}
CLASS_BY_NAME.update({"tri": ElementClass.TRIANGLE, "cube": ElementClass.HEX})


def encode_face(orientation: int, dual_face: int, dim: int) -> int:
    return int(orientation) * FACE_CODE_BASE[dim] + int(dual_face)


def decode_face(code: int, dim: int) -> tuple[int, int]:
    """Return ``(orientation, dual_face)``."""
    return divmod(int(code), FACE_CODE_BASE[dim])


@dataclass(frozen=True)
class FaceConnection:
    neighbor_tree: int      # global id
    dual_face: int
    orientation: int
    boundary: bool

    def encoded(self, dim: int) -> int:
        return encode_face(self.orientation, self.dual_face, dim)


@dataclass
class Tree:
    gid: int
    eclass: ElementClass
    tree_to_tree: np.ndarray    # local tree or ghost index per face
    tree_to_face: np.ndarray    # encoded connection per face
    vertices: np.ndarray        # (num_vertices, dim) float geometry
    payload: bytes = b""

    def copy(self) -> "Tree":
        return Tree(self.gid, self.eclass, self.tree_to_tree.copy(),
                    self.tree_to_face.copy(), self.vertices, self.payload)


@dataclass
class GhostTree:
    gid: int
    eclass: ElementClass
    tree_to_tree: np.ndarray    # global neighbor ids per face
    tree_to_face: np.ndarray
    vertices: np.ndarray

    def same_as(self, other: "GhostTree") -> bool:
        return (self.gid == other.gid and self.eclass == other.eclass
                and np.array_equal(self.tree_to_tree, other.tree_to_tree)
                and np.array_equal(self.tree_to_face, other.tree_to_face)
                and np.array_equal(self.vertices, other.vertices))


# ---------------------------------------------------------------------------
# Offset arrays


@dataclass(frozen=True)
class PartitionViolation:
    prop: str                 # "format", "i", "ii", "iii" or "coverage"
    ranks: tuple[int, ...]
    message: str


def decode_offsets(offsets, p: int) -> tuple[int, int, int]:
    """First tree ``k_p``, last tree ``K_p`` and local count ``n_p`` of rank p."""
    o = int(offsets[p])
    k = o if o >= 0 else -o - 1
    last = abs(int(offsets[p + 1])) - 1
    return k, last, last - k + 1


def decode_all(offsets) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(k_p, K_p)`` for all ranks."""
    o = np.asarray(offsets, np.int64)
    first = np.where(o[:-1] >= 0, o[:-1], -o[:-1] - 1)
    last = np.abs(o[1:]) - 1
    return first, last


def search_starts(offsets) -> np.ndarray:
    """Monotone first-tree array for binary search.

    An empty rank takes the start of the next nonempty rank; trailing empty
    ranks take the tree count.
    """
    first, last = decode_all(offsets)
    out = np.where(last >= first, first, np.iinfo(np.int64).max)
    out = np.minimum.accumulate(out[::-1])[::-1]
    return np.minimum(out, abs(int(offsets[-1])))


def tree_sets(offsets) -> list[range]:
    first, last = decode_all(offsets)
    return [range(int(a), int(b) + 1) for a, b in zip(first, last)]


def offsets_from_sets(sets: Sequence[Sequence[int]], num_trees: int) -> np.ndarray:
    """Encode explicit per-rank tree sets of a valid partition."""
    bad = validate_tree_sets(sets, num_trees)
    if bad is not None:
        raise ValueError(f"invalid partition: ({bad.prop}) {bad.message}")
    P = len(sets)
    out = np.zeros(P + 1, np.int64)
    prev_last = -1
    for p, s in enumerate(sets):
        if len(s) == 0:
            out[p] = prev_last + 1
            continue
        k = min(s)
        out[p] = -k - 1 if k == prev_last else k
        prev_last = max(s)
    out[P] = num_trees
    return out


def validate_tree_sets(sets: Sequence[Sequence[int]], num_trees: int) -> PartitionViolation | None:
    """Check consecutiveness, ordering, sharing and coverage of tree sets."""
    ranges = []
    for p, s in enumerate(sets):
        s = sorted(set(int(k) for k in s))
        if s and (s[0] < 0 or s[-1] >= num_trees):
            return PartitionViolation("format", (p,), f"rank {p} holds a tree id out of range")
        if s and s[-1] - s[0] + 1 != len(s):
            return PartitionViolation("i", (p,), f"trees of rank {p} are not consecutive")
        ranges.append((s[0], s[-1]) if s else None)
    nonempty = [p for p, r in enumerate(ranges) if r is not None]
    for a, b in zip(nonempty, nonempty[1:]):
        if ranges[a][1] > ranges[b][0]:
            return PartitionViolation("ii", (a, b),
                                      f"rank {a} ends at tree {ranges[a][1]} after rank {b} "
                                      f"starts at tree {ranges[b][0]}")
    for a, b in itertools.combinations(nonempty, 2):
        shared = set(range(ranges[a][0], ranges[a][1] + 1)) & set(range(ranges[b][0], ranges[b][1] + 1))
        if len(shared) > 1 or any(k not in ranges[a] or k not in ranges[b] for k in shared):
            return PartitionViolation("iii", (a, b), f"ranks {a} and {b} share inner trees")
    covered = set()
    for r in ranges:
        if r is not None:
            covered.update(range(r[0], r[1] + 1))
    if len(covered) != num_trees:
        missing = min(set(range(num_trees)) - covered)
        return PartitionViolation("coverage", (), f"tree {missing} is not assigned")
    return None


def validate_partition(offsets) -> PartitionViolation | None:
    """Check that an offset array encodes a valid partition."""
    o = np.asarray(offsets, np.int64)
    if o.ndim != 1 or len(o) < 2:
        return PartitionViolation("format", (), "need at least two entries")
    P = len(o) - 1
    if o[0] != 0:
        return PartitionViolation("format", (0,), "first entry must be 0")
    if o[P] < 0:
        return PartitionViolation("format", (P,), "last entry must hold the tree count")
    first, last = decode_all(o)
    prev_last = -1
    for p in range(P):
        n = last[p] - first[p] + 1
        if n < 0:
            return PartitionViolation("ii", (p,), f"rank {p} has a negative tree count")
        if o[p] < 0:
            if n == 0:
                return PartitionViolation("format", (p,), f"empty rank {p} is marked shared")
            if prev_last != first[p]:
                return PartitionViolation("iii", (p,), f"rank {p} claims to share tree "
                                          f"{first[p]} with no previous owner")
        elif n == 0:
            if first[p] != prev_last + 1:
                return PartitionViolation("format", (p,), f"empty rank {p} has wrong start")
        elif first[p] != prev_last + 1:
            return PartitionViolation("ii", (p,), f"rank {p} starts at tree {first[p]} "
                                      f"but the previous range ends at {prev_last}")
        if n > 0:
            prev_last = last[p]
    if prev_last != o[P] - 1:
        return PartitionViolation("coverage", (), "ranges do not reach the last tree")
    return validate_tree_sets(tree_sets(o), int(o[P]))


def check_partition(offsets) -> np.ndarray:
    bad = validate_partition(offsets)
    if bad is not None:
        raise ValueError(f"invalid partition ({bad.prop}) at ranks {bad.ranks}: {bad.message}")
    return np.asarray(offsets, np.int64)


def uniform_offsets(num_trees: int, num_ranks: int) -> np.ndarray:
    """Disjoint near-equal tree ranges."""
    cuts = (np.arange(num_ranks + 1, dtype=np.int64) * num_trees) // num_ranks
    return cuts


# ---------------------------------------------------------------------------
# Who sends what during repartitioning


def min_owner(k: int, offsets) -> int:
    """Smallest rank holding tree k."""
    first, last = decode_all(offsets)
    r = int(np.searchsorted(last, k, side="left"))
    if r >= len(last) or first[r] > k:
        raise ValueError(f"tree {k} has no owner")
    return r


def _owns(offsets, p: int, k: int) -> bool:
    a, b, _ = decode_offsets(offsets, p)
    return a <= k <= b


def send_range(sender: int, q: int, offsets, new_offsets) -> tuple[int, int]:
    """Consecutive tree ids ``sender`` ships to ``q``; empty when ``last < first``.

    A tree needed by q comes from q itself if q already holds it, otherwise
    from its smallest old owner.  Constant time.
    """
    a, b, n = decode_offsets(offsets, sender)
    na, nb, nn = decode_offsets(new_offsets, q)
    if n <= 0 or nn <= 0:
        return 0, -1
    if sender == q:
        return max(a, na), min(b, nb)
    lo = a + 1 if offsets[sender] < 0 else a   # first tree not shared downward
    lo, hi = max(lo, na), min(b, nb)
    if lo > hi:
        return 0, -1
    qa, qb, qn = decode_offsets(offsets, q)
    if qn > 0:
        # q shares at most one tree with sender, at an end of the range
        if qa <= lo <= qb:
            lo += 1
        if qa <= hi <= qb:
            hi -= 1
    return (lo, hi) if lo <= hi else (0, -1)


def sends_tree(sender: int, q: int, k: int, offsets, new_offsets) -> bool:
    lo, hi = send_range(sender, q, offsets, new_offsets)
    return lo <= k <= hi


def sends_to(sender: int, q: int, offsets, new_offsets) -> bool:
    lo, hi = send_range(sender, q, offsets, new_offsets)
    return lo <= hi


@dataclass(frozen=True)
class CommPattern:
    send: tuple[int, ...]
    recv: tuple[int, ...]

    @property
    def s_first(self) -> int:
        return self.send[0] if self.send else -1

    @property
    def s_last(self) -> int:
        return self.send[-1] if self.send else -2

    @property
    def r_first(self) -> int:
        return self.recv[0] if self.recv else -1

    @property
    def r_last(self) -> int:
        return self.recv[-1] if self.recv else -2


def _rank_bracket(lo_tree: int, hi_tree: int, offsets) -> tuple[int, int]:
    """Ranks whose tree range meets ``[lo_tree, hi_tree]`` (by binary search)."""
    _, last = decode_all(offsets)
    r0 = int(np.searchsorted(last, lo_tree, side="left"))
    r1 = int(np.searchsorted(search_starts(offsets), hi_tree, side="right")) - 1
    return r0, r1


def send_recv_sets(p: int, offsets, new_offsets) -> CommPattern:
    """Ranks ``p`` sends local trees to and receives them from."""
    a, b, n = decode_offsets(offsets, p)
    send = []
    if n > 0:
        r0, r1 = _rank_bracket(a, b, new_offsets)
        send = [q for q in range(r0, r1 + 1) if sends_to(p, q, offsets, new_offsets)]
    na, nb, nn = decode_offsets(new_offsets, p)
    recv = []
    if nn > 0:
        r0, r1 = _rank_bracket(na, nb, offsets)
        recv = [s for s in range(r0, r1 + 1) if sends_to(s, p, offsets, new_offsets)]
    return CommPattern(tuple(send), tuple(recv))


# ---------------------------------------------------------------------------
# The per-rank coarse mesh


@dataclass
class CoarseMesh:
    dim: int
    rank: int
    offsets: np.ndarray
    trees: list[Tree]
    ghosts: list[GhostTree] = field(default_factory=list)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, np.int64)
        self._ghost_index = {g.gid: i for i, g in enumerate(self.ghosts)}

    @property
    def num_ranks(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_trees(self) -> int:
        return int(self.offsets[-1])

    @property
    def first_tree(self) -> int:
        return decode_offsets(self.offsets, self.rank)[0]

    @property
    def n_p(self) -> int:
        return len(self.trees)

    @property
    def n_ghosts(self) -> int:
        return len(self.ghosts)

    @property
    def face_base(self) -> int:
        return FACE_CODE_BASE[self.dim]

    def is_local(self, gid: int) -> bool:
        return 0 <= gid - self.first_tree < self.n_p

    def local_index(self, gid: int) -> int:
        """Local tree index, ghost index offset by ``n_p``, or -1."""
        if self.is_local(gid):
            return gid - self.first_tree
        g = self._ghost_index.get(gid)
        return -1 if g is None else self.n_p + g

    def tree(self, gid: int) -> Tree:
        return self.trees[gid - self.first_tree]

    def ghost(self, gid: int) -> GhostTree:
        return self.ghosts[self._ghost_index[gid]]

    def lookup(self, gid: int) -> Tree | GhostTree:
        if self.is_local(gid):
            return self.tree(gid)
        return self.ghost(gid)

    def has_tree(self, gid: int) -> bool:
        return self.local_index(gid) >= 0

    def global_id(self, index: int) -> int:
        if index < self.n_p:
            return self.first_tree + index
        return self.ghosts[index - self.n_p].gid

    def neighbor_gids(self, gid: int) -> np.ndarray:
        """Global neighbor ids of a local or ghost tree."""
        if self.is_local(gid):
            t = self.tree(gid)
            return np.array([self.global_id(int(i)) for i in t.tree_to_tree], np.int64)
        return self.ghost(gid).tree_to_tree.copy()

    def face_connection(self, gid: int, face: int) -> FaceConnection:
        t = self.lookup(gid)
        nbr = int(self.neighbor_gids(gid)[face])
        o, dual = decode_face(int(t.tree_to_face[face]), self.dim)
        return FaceConnection(nbr, dual, o, nbr == gid and dual == face)

    def tree_class(self, gid: int) -> ElementClass:
        return self.lookup(gid).eclass

    def tree_vertices(self, gid: int) -> np.ndarray:
        return self.lookup(gid).vertices

    def local_gids(self) -> range:
        return range(self.first_tree, self.first_tree + self.n_p)

    def check(self) -> None:
        """Assert index ranges match the partition and ghosts are exactly the halo."""
        k, last, n = decode_offsets(self.offsets, self.rank)
        assert n == self.n_p, (n, self.n_p)
        assert all(t.gid == k + i for i, t in enumerate(self.trees))
        limit = self.n_p + self.n_ghosts
        halo = set()
        for t in self.trees:
            assert len(t.tree_to_tree) == t.eclass.num_faces
            assert ((0 <= t.tree_to_tree) & (t.tree_to_tree < limit)).all(), t
            for idx in t.tree_to_tree:
                gid = self.global_id(int(idx))
                if not self.is_local(gid):
                    halo.add(gid)
        assert halo == set(self._ghost_index), (halo, set(self._ghost_index))
        assert [g.gid for g in self.ghosts] == sorted(self._ghost_index)


# ---------------------------------------------------------------------------
# Replicated meshes and direct distribution


def _sorted_ghosts(ghosts) -> list[GhostTree]:
    return sorted(ghosts, key=lambda g: g.gid)


def replicated_cmesh(dim: int, eclasses, neighbors, faces, vertices, payloads=None) -> CoarseMesh:
    """Single-rank mesh holding every tree with global connectivity arrays."""
    K = len(eclasses)
    trees = []
    for k in range(K):
        trees.append(Tree(k, ElementClass(eclasses[k]), np.asarray(neighbors[k], np.int64),
                          np.asarray(faces[k], np.int64), np.asarray(vertices[k], float),
                          b"" if payloads is None else payloads[k]))
    mesh = CoarseMesh(dim, 0, np.array([0, K], np.int64), trees)
    check_symmetric(mesh)
    return mesh


def check_symmetric(mesh: CoarseMesh) -> None:
    """Raise if any face connection is not mirrored by its neighbor."""
    if mesh.num_ranks != 1:
        raise ValueError("symmetry check needs a replicated mesh")
    K = mesh.num_trees
    for t in mesh.trees:
        for f in range(t.eclass.num_faces):
            u = int(t.tree_to_tree[f])
            if not 0 <= u < K:
                raise ValueError(f"tree {t.gid} face {f}: dangling neighbor {u}")
            o, g = decode_face(int(t.tree_to_face[f]), mesh.dim)
            other = mesh.trees[u]
            if not 0 <= g < other.eclass.num_faces:
                raise ValueError(f"tree {t.gid} face {f}: bad dual face {g}")
            if u == t.gid and g == f:
                if o != 0:
                    raise ValueError(f"tree {t.gid} face {f}: boundary with orientation")
                continue
            if int(other.tree_to_tree[g]) != t.gid or \
                    decode_face(int(other.tree_to_face[g]), mesh.dim) != (o, f):
                raise ValueError(f"asymmetric connection: tree {t.gid} face {f} -> "
                                 f"tree {u} face {g}")
            if t.eclass.face_class() != other.eclass.face_class():
                raise ValueError(f"tree {t.gid} face {f}: face shapes differ")


def ghost_trees(mesh: CoarseMesh, offsets) -> list[list[GhostTree]]:
    """Ghost trees of every rank of a replicated mesh under ``offsets``."""
    if mesh.num_ranks != 1:
        raise ValueError("ghost computation needs a replicated mesh")
    offsets = check_partition(offsets)
    if offsets[-1] != mesh.num_trees:
        raise ValueError("offsets and mesh disagree on the tree count")
    out = []
    for p, rng in enumerate(tree_sets(offsets)):
        gids = set()
        for k in rng:
            for u in mesh.trees[k].tree_to_tree:
                u = int(u)
                if not 0 <= u < mesh.num_trees:
                    raise ValueError(f"tree {k}: dangling neighbor {u}")
                if u not in rng:
                    gids.add(u)
        out.append([_ghost_from_tree(mesh.trees[g]) for g in sorted(gids)])
    return out


def _ghost_from_tree(t: Tree, to_global=None) -> GhostTree:
    nbrs = t.tree_to_tree if to_global is None else np.array([to_global(int(i)) for i in t.tree_to_tree], np.int64)
    return GhostTree(t.gid, t.eclass, np.asarray(nbrs, np.int64).copy(), t.tree_to_face.copy(), t.vertices)


def split_cmesh(mesh: CoarseMesh, offsets) -> list[CoarseMesh]:
    """Distribute a replicated mesh directly (no messages)."""
    offsets = check_partition(offsets)
    ghosts = ghost_trees(mesh, offsets)
    out = []
    for p, rng in enumerate(tree_sets(offsets)):
        gindex = {g.gid: len(rng) + i for i, g in enumerate(ghosts[p])}
        trees = []
        for k in rng:
            src = mesh.trees[k]
            local = np.array([u - rng.start if u in rng else gindex[u]
                              for u in map(int, src.tree_to_tree)], np.int64)
            trees.append(Tree(k, src.eclass, local, src.tree_to_face.copy(), src.vertices, src.payload))
        out.append(CoarseMesh(mesh.dim, p, offsets.copy(), trees, ghosts[p]))
    return out


def gather_cmesh(meshes: Sequence[CoarseMesh]) -> CoarseMesh:
    """Reassemble a replicated mesh from per-rank meshes (shared trees once)."""
    dim = meshes[0].dim
    by_gid: dict[int, Tree] = {}
    for m in meshes:
        for t in m.trees:
            glob = np.array([m.global_id(int(i)) for i in t.tree_to_tree], np.int64)
            g = Tree(t.gid, t.eclass, glob, t.tree_to_face.copy(), t.vertices, t.payload)
            if t.gid in by_gid:
                prev = by_gid[t.gid]
                assert np.array_equal(prev.tree_to_tree, g.tree_to_tree)
                assert np.array_equal(prev.tree_to_face, g.tree_to_face)
            by_gid.setdefault(t.gid, g)
    K = meshes[0].num_trees
    assert sorted(by_gid) == list(range(K))
    return CoarseMesh(dim, 0, np.array([0, K], np.int64), [by_gid[k] for k in range(K)])


# ---------------------------------------------------------------------------
# Repartitioning over virtual ranks


@dataclass
class _Shipment:
    trees: list[Tree]
    ghosts: list[GhostTree]


def _ghost_senders(mesh: CoarseMesh, gid: int, q: int, new_offsets) -> set[int]:
    """Ranks that ship some neighbor of tree ``gid`` to q as a local tree."""
    S = set()
    O = mesh.offsets
    for u in mesh.neighbor_gids(gid):
        u = int(u)
        r0, r1 = _rank_bracket(u, u, O)
        for r in range(r0, r1 + 1):
            if sends_tree(r, q, u, O, new_offsets):
                S.add(r)
    return S


def should_send_ghost(mesh: CoarseMesh, gid: int, q: int, new_offsets) -> bool:
    """Whether this rank is the unique sender of ghost ``gid`` to q.

    q sends to itself whenever it ships a neighbor of the ghost to itself;
    otherwise the smallest considering rank sends.
    """
    S = _ghost_senders(mesh, gid, q, new_offsets)
    p = mesh.rank
    if q in S:
        return p == q
    return bool(S) and p == min(S)


def _parse_neighbors(mesh: CoarseMesh, k: int, q: int, new_offsets, chosen: dict[int, GhostTree]):
    nq_first, nq_last, _ = decode_offsets(new_offsets, q)
    for u in mesh.neighbor_gids(k):
        u = int(u)
        if nq_first <= u <= nq_last or u in chosen:
            continue
        if should_send_ghost(mesh, u, q, new_offsets):
            if mesh.is_local(u):
                chosen[u] = _ghost_from_tree(mesh.tree(u), mesh.global_id)
            else:
                g = mesh.ghost(u)
                chosen[u] = GhostTree(g.gid, g.eclass, g.tree_to_tree.copy(),
                                      g.tree_to_face.copy(), g.vertices)


def _ids_phase1(mesh: CoarseMesh, trees: list[Tree], q: int, new_offsets) -> list[Tree]:
    """Rewrite neighbor entries that will be local on q; mark the rest."""
    nq_first, nq_last, _ = decode_offsets(new_offsets, q)
    out = []
    for t in trees:
        new = t.copy()
        for f, idx in enumerate(t.tree_to_tree):
            u = mesh.global_id(int(idx))
            new.tree_to_tree[f] = u - nq_first if nq_first <= u <= nq_last else -1 - u
        out.append(new)
    return out


def _ids_phase2(dim: int, trees: list[Tree], ghosts: list[GhostTree], first: int) -> None:
    """Point local trees at the received ghosts' new local indices."""
    n_p = len(trees)
    base = FACE_CODE_BASE[dim]
    for j, g in enumerate(ghosts):
        for f, u in enumerate(g.tree_to_tree):
            u = int(u)
            if first <= u < first + n_p:
                dual = int(g.tree_to_face[f]) % base
                t = trees[u - first]
                assert t.tree_to_tree[dual] == -1 - g.gid, (t.gid, dual, g.gid)
                t.tree_to_tree[dual] = n_p + j
    for t in trees:
        if (t.tree_to_tree < 0).any():
            raise RuntimeError(f"tree {t.gid} kept an unresolved neighbor")


def partition_cmesh(meshes: Sequence[CoarseMesh], new_offsets, world: RankWorld | None = None,
                    plan: dict | None = None) -> list[CoarseMesh]:
    """Repartition per-rank meshes to ``new_offsets`` with one round of messages.

    ``plan``, when given, receives ``{(sender, receiver): (tree ids, ghost ids)}``.
    """
    new_offsets = check_partition(new_offsets)
    P = len(meshes)
    if len(new_offsets) != P + 1 or new_offsets[-1] != meshes[0].num_trees:
        raise ValueError("new offsets do not fit the mesh")
    if world is None:
        world = RankWorld(P)
    if world.size != P:
        raise ValueError("world size differs from the rank count")
    saved = world.states
    world.states = list(meshes)
    dim = meshes[0].dim

    def send_step(ctx, mesh: CoarseMesh):
        pattern = send_recv_sets(ctx.rank, mesh.offsets, new_offsets)
        for q in pattern.send:
            s, e = send_range(ctx.rank, q, mesh.offsets, new_offsets)
            T = [mesh.tree(k) for k in range(s, e + 1)]
            chosen: dict[int, GhostTree] = {}
            for k in range(s, e + 1):
                _parse_neighbors(mesh, k, q, new_offsets, chosen)
            G = [chosen[g] for g in sorted(chosen)]
            if plan is not None:
                plan[(ctx.rank, q)] = (tuple(range(s, e + 1)), tuple(sorted(chosen)))
            ctx.send(q, "cmesh", _Shipment(_ids_phase1(mesh, T, q, new_offsets), G))
        return (mesh, pattern)

    def recv_step(ctx, state):
        mesh, pattern = state
        got = ctx.receive_from("cmesh")
        if tuple(sorted(got)) != pattern.recv:
            raise RuntimeError(f"rank {ctx.rank} expected trees from {pattern.recv}, "
                               f"got {tuple(sorted(got))}")
        trees: list[Tree] = []
        ghosts: dict[int, GhostTree] = {}
        for sender in pattern.recv:
            trees.extend(got[sender].trees)
            for g in got[sender].ghosts:
                if g.gid in ghosts:
                    raise RuntimeError(f"rank {ctx.rank} received ghost {g.gid} twice")
                ghosts[g.gid] = g
        first, last, n = decode_offsets(new_offsets, ctx.rank)
        if [t.gid for t in trees] != list(range(first, last + 1)):
            raise RuntimeError(f"rank {ctx.rank} received trees {[t.gid for t in trees]}")
        ghost_list = _sorted_ghosts(ghosts.values())
        _ids_phase2(dim, trees, ghost_list, first)
        return CoarseMesh(dim, ctx.rank, new_offsets.copy(), trees, ghost_list)

    world.run_phase(send_step)
    world.run_phase(recv_step)
    out = world.states
    world.states = saved
    return out


# ---------------------------------------------------------------------------
# Connectivity from vertex coordinates


def _vertex_key(v) -> tuple[int, ...]:
    return tuple(int(x) for x in np.round(np.asarray(v, float) * 1e9).astype(np.int64))


def connect_by_vertices(eclasses, vertices, period=None):
    """Face neighbors and encoded connections from coincident face vertices.

    ``period`` holds a per-axis period length (0 or None for no wrap).
    Returns ``(neighbors, faces)`` lists of integer arrays.
    """
    K = len(eclasses)
    eclasses = [ElementClass(c) for c in eclasses]
    dim = eclasses[0].dim
    period = np.zeros(dim) if period is None else np.array([p or 0 for p in period], float)
    table: dict[tuple, list[tuple[int, int]]] = {}
    for k in range(K):
        for f, fv in enumerate(FACE_VERTICES[eclasses[k]]):
            key = tuple(sorted(_vertex_key(vertices[k][v]) for v in fv))
            table.setdefault(key, []).append((k, f))
            if len(table[key]) > 2:
                raise ValueError(f"faces {table[key]} coincide")
    shifts = [np.zeros(dim)]
    for axis in range(dim):
        if period[axis] > 0:
            for sgn in (1, -1):
                s = np.zeros(dim)
                s[axis] = sgn * period[axis]
                shifts.append(s)
    neighbors = [np.full(c.num_faces, -1, np.int64) for c in eclasses]
    codes = [np.zeros(c.num_faces, np.int64) for c in eclasses]
    for k in range(K):
        for f, fv in enumerate(FACE_VERTICES[eclasses[k]]):
            pts = [np.asarray(vertices[k][v], float) for v in fv]
            match = None
            for s in shifts:
                key = tuple(sorted(_vertex_key(p + s) for p in pts))
                hits = [h for h in table.get(key, ()) if h != (k, f)]
                if hits:
                    match = (hits[0], s)
                    break
            if match is None:
                neighbors[k][f] = k
                codes[k][f] = encode_face(0, f, dim)
                continue
            (u, g), s = match
            o = _orientation(eclasses[k], k, f, eclasses[u], u, g, vertices, s)
            neighbors[k][f] = u
            codes[k][f] = encode_face(o, g, dim)
    return neighbors, codes


def face_is_first(class_a: ElementClass, face_a: int, class_b: ElementClass, face_b: int,
                  tree_a: int = 0, tree_b: int = 0) -> bool:
    """Whether face a defines the orientation of the a-b gluing.

    Smaller class first, then smaller face number, then smaller tree id.
    """
    if class_a != class_b:
        return class_a < class_b
    if face_a != face_b:
        return face_a < face_b
    return tree_a <= tree_b


def _orientation(ca, ka, fa, cb, kb, fb, vertices, shift_ab) -> int:
    """Corner of the second face matching corner 0 of the first face."""
    if face_is_first(ca, fa, cb, fb, ka, kb):
        src, dst, s = (ka, ca, fa), (kb, cb, fb), shift_ab
    else:
        src, dst, s = (kb, cb, fb), (ka, ca, fa), -shift_ab
    v0 = np.asarray(vertices[src[0]][FACE_VERTICES[src[1]][src[2]][0]], float) + s
    key0 = _vertex_key(v0)
    for j, v in enumerate(FACE_VERTICES[dst[1]][dst[2]]):
        if _vertex_key(vertices[dst[0]][v]) == key0:
            return j
    raise ValueError("glued faces share no corner")


# ---------------------------------------------------------------------------
# Builtin meshes

_CUBE_CORNERS = {d: np.array([[(c >> i) & 1 for i in range(d)] for c in range(1 << d)])
                 for d in (1, 2, 3)}
_KUHN = {
    2: ((0, 1, 3), (0, 2, 3)),
    3: ((0, 1, 5, 7), (0, 1, 3, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 6, 7), (0, 4, 5, 7)),
}


def _cells(shape):
    return itertools.product(*[range(n) for n in reversed(shape)])


def brick_cmesh(nx: int, ny: int, nz: int = 0, eclass: ElementClass | str = ElementClass.HEX,
                periodic: bool | Sequence[bool] = False) -> CoarseMesh:
    """Structured block of cells, each one cube tree or d! simplex trees."""
    eclass = CLASS_BY_NAME[eclass] if isinstance(eclass, str) else ElementClass(eclass)
    dim = eclass.dim
    shape = [nx, ny, nz][:dim]
    if any(int(n) < 1 for n in shape):
        raise ValueError(f"brick dimensions must be positive, got {shape}")
    if isinstance(periodic, bool):
        periodic = [periodic] * dim
    period = [float(n) if w else 0.0 for n, w in zip(shape, periodic)]
    corners = _CUBE_CORNERS[dim]
    classes, verts = [], []
    for cell in _cells(shape):
        origin = np.array(cell[::-1], float)
        if eclass.is_simplex:
            for simplex in _KUHN[dim]:
                classes.append(eclass)
                verts.append(origin + corners[list(simplex)])
        else:
            classes.append(eclass)
            verts.append(origin + corners)
    return from_geometry(classes, verts, period)


def from_geometry(eclasses, vertices, period=None, payloads=None) -> CoarseMesh:
    dim = ElementClass(eclasses[0]).dim
    neighbors, codes = connect_by_vertices(eclasses, vertices, period)
    return replicated_cmesh(dim, eclasses, neighbors, codes, vertices, payloads)


def hybrid_square(periodic: bool = False) -> CoarseMesh:
    """Unit square on a 2x2 grid: triangle pairs on the diagonal cells, quads off it.

    The triangle cells are split along the diagonal through the square's center.
    """
    corners = _CUBE_CORNERS[2] * 0.5
    classes, verts = [], []
    for cy in range(2):
        for cx in range(2):
            origin = np.array([cx, cy]) * 0.5
            if cx != cy:
                classes.append(ElementClass.QUAD)
                verts.append(origin + corners)
            else:
                for simplex in _KUHN[2]:
                    classes.append(ElementClass.TRIANGLE)
                    verts.append(origin + corners[list(simplex)])
    return from_geometry(classes, verts, [1.0, 1.0] if periodic else None)


def disjoint_bricks(nx: int, ny: int, nz: int, num_ranks: int) -> CoarseMesh:
    """``num_ranks`` unconnected hex bricks, brick p holding trees of rank p."""
    one = brick_cmesh(nx, ny, nz)
    classes, verts = [], []
    for p in range(num_ranks):
        for t in one.trees:
            classes.append(t.eclass)
            verts.append(t.vertices + np.array([2.0 * nx * p, 0.0, 0.0]))
    return from_geometry(classes, verts)


def shift_fraction_offsets(offsets, fraction: float) -> np.ndarray:
    """Each rank but the last hands ``floor(fraction * n_p)`` of its last trees to p+1."""
    offsets = check_partition(offsets)
    P = len(offsets) - 1
    sets = []
    give = [0] * P
    for p in range(P):
        _, _, n = decode_offsets(offsets, p)
        if p < P - 1:
            give[p] = int(np.floor(fraction * n))
    for p in range(P):
        a, b, n = decode_offsets(offsets, p)
        lo = a
        hi = b - give[p]
        if p > 0:
            lo -= give[p - 1]
        sets.append(range(lo, hi + 1))
    return offsets_from_sets(sets, int(offsets[-1]))


BUILTIN_MESHES = ("unit_square_quad", "unit_square_tri2", "unit_square_hybrid",
                  "unit_cube_hex", "unit_cube_tet6", "brick", "line",
                  "periodic_square_quad", "periodic_square_tri2", "periodic_square_hybrid",
                  "periodic_cube_hex", "periodic_cube_tet6", "periodic_brick",
                  "comparelevels", "five_trees")


def builtin_cmesh(kind: str, **params) -> CoarseMesh:
    """Replicated builtin coarse mesh by name."""
    periodic = kind.startswith("periodic_")
    base = kind.replace("periodic_", "unit_", 1) if kind.startswith("periodic_square") or \
        kind.startswith("periodic_cube") else kind.replace("periodic_", "", 1)
    if base == "unit_square_quad":
        return brick_cmesh(1, 1, eclass=ElementClass.QUAD, periodic=periodic)
    if base == "unit_square_tri2":
        return brick_cmesh(1, 1, eclass=ElementClass.TRIANGLE, periodic=periodic)
    if base == "unit_square_hybrid":
        return hybrid_square(periodic)
    if base == "unit_cube_hex":
        return brick_cmesh(1, 1, 1, eclass=ElementClass.HEX, periodic=periodic)
    if base == "unit_cube_tet6":
        return brick_cmesh(1, 1, 1, eclass=ElementClass.TET, periodic=periodic)
    if base == "line":
        return brick_cmesh(int(params.get("nx", 1)), 0, eclass=ElementClass.LINE, periodic=periodic)
    if base == "brick":
        try:
            nx, ny, nz = (int(params.get(k, 1)) for k in ("nx", "ny", "nz"))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad brick parameters {params}") from exc
        eclass = params.get("eclass", ElementClass.HEX)
        return brick_cmesh(nx, ny, nz, eclass=eclass, periodic=periodic)
    if base == "comparelevels":
        # three triangles around a center point, pairwise face-adjacent
        c = np.array([0.5, 0.4])
        outer = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
        tris = [[outer[0], outer[1], c], [outer[1], outer[2], c], [outer[2], outer[0], c]]
        return from_geometry([ElementClass.TRIANGLE] * 3, [np.array(t) for t in tris])
    if base == "five_trees":
        return brick_cmesh(5, 1, eclass=ElementClass.QUAD)
    raise ValueError(f"unknown builtin mesh {kind!r}; choose from {', '.join(BUILTIN_MESHES)}")


# ---------------------------------------------------------------------------
# Text format


def write_text(mesh: CoarseMesh) -> str:
    if mesh.num_ranks != 1:
        mesh = gather_cmesh([mesh])
    lines = [f"t8txt 1 {mesh.dim} {mesh.num_trees}"]
    for t in mesh.trees:
        coords = " ".join(repr(float(x)) for x in np.asarray(t.vertices).ravel())
        lines.append(f"tree {t.gid} {CLASS_NAMES[t.eclass]} {coords}")
    for t in mesh.trees:
        for f in range(t.eclass.num_faces):
            u, code = int(t.tree_to_tree[f]), int(t.tree_to_face[f])
            if u == t.gid and code == encode_face(0, f, mesh.dim):
                lines.append(f"boundary {t.gid} {f}")
            else:
                lines.append(f"face {t.gid} {f} {u} {code}")
    return "\n".join(lines) + "\n"


class MeshFormatError(ValueError):
    pass


def read_text(text: str) -> CoarseMesh:
    """Parse the text format; reject malformed or asymmetric connectivity."""
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, w) for n, w in lines if w and not w[0].startswith("#")]
    if not lines or lines[0][1][:2] != ["t8txt", "1"] or len(lines[0][1]) != 4:
        raise MeshFormatError("line 1: expected header 't8txt 1 <dim> <K>'")
    try:
        dim, K = int(lines[0][1][2]), int(lines[0][1][3])
    except ValueError:
        raise MeshFormatError("line 1: bad header numbers") from None
    if dim not in FACE_CODE_BASE or K < 1:
        raise MeshFormatError("line 1: bad dimension or tree count")
    classes: list = [None] * K
    verts: list = [None] * K
    nbrs: list = [None] * K
    codes: list = [None] * K
    seen = set()
    for n, w in lines[1:]:
        try:
            if w[0] == "tree":
                k, cls = int(w[1]), CLASS_BY_NAME[w[2]]
                if cls.dim != dim:
                    raise MeshFormatError(f"line {n}: class {w[2]} in a {dim}D mesh")
                coords = np.array([float(x) for x in w[3:]])
                if coords.size != cls.num_vertices * dim:
                    raise MeshFormatError(f"line {n}: expected {cls.num_vertices * dim} coordinates")
                classes[k] = cls
                verts[k] = coords.reshape(cls.num_vertices, dim)
                nbrs[k] = np.full(cls.num_faces, -1, np.int64)
                codes[k] = np.full(cls.num_faces, -1, np.int64)
            elif w[0] in ("face", "boundary"):
                k, f = int(w[1]), int(w[2])
                if nbrs[k] is None:
                    raise MeshFormatError(f"line {n}: face record before tree {k}")
                if (k, f) in seen:
                    raise MeshFormatError(f"line {n}: duplicate record for tree {k} face {f}")
                seen.add((k, f))
                if w[0] == "boundary":
                    nbrs[k][f], codes[k][f] = k, encode_face(0, f, dim)
                else:
                    nbrs[k][f], codes[k][f] = int(w[3]), int(w[4])
            else:
                raise MeshFormatError(f"line {n}: unknown record {w[0]!r}")
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"line {n}: {exc}") from None
    for k in range(K):
        if classes[k] is None:
            raise MeshFormatError(f"tree {k} missing")
        if (nbrs[k] < 0).any():
            raise MeshFormatError(f"tree {k}: face {int(np.argmin(nbrs[k]))} has no record")
    try:
        return replicated_cmesh(dim, classes, nbrs, codes, verts)
    except ValueError as exc:
        raise MeshFormatError(str(exc)) from None


def mesh_info(mesh: CoarseMesh) -> dict:
    counts: dict[str, int] = {}
    boundary = interior = 0
    for t in mesh.trees:
        counts[CLASS_NAMES[t.eclass]] = counts.get(CLASS_NAMES[t.eclass], 0) + 1
        for f in range(t.eclass.num_faces):
            if mesh.face_connection(t.gid, f).boundary:
                boundary += 1
            else:
                interior += 1
    return {"dim": mesh.dim, "trees": mesh.num_trees, "classes": counts,
            "boundary_faces": boundary, "connected_faces": interior}
