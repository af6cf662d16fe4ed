"""Element-local arithmetic for lines, quads, hexes, triangles and tetrahedra.

Cubical classes use the Morton curve, simplices use the tetrahedral Morton
curve.  Every element is identified by its anchor node, a level and a type.
Anchors live on the integer lattice of the scaled root ``[0, 2**L]**d``.

Two calling styles are supported by every :class:`Scheme` method:

* scalar, on :class:`ElementKey` values, and
* batched, on :class:`Elements` (struct-of-arrays over numpy).

The batched form does the work; the scalar form wraps a batch of one.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

MAX_LEVEL = 21


class ElementClass(IntEnum):
    VERTEX = -1  # face shape of a line; not used for trees
    LINE = 0
    QUAD = 1
    HEX = 2
    TRIANGLE = 3
    TET = 4

    @property
    def dim(self) -> int:
        return _DIM[self]

    @property
    def is_simplex(self) -> bool:
        return self in (ElementClass.TRIANGLE, ElementClass.TET)

    @property
    def type_count(self) -> int:
        return {ElementClass.TRIANGLE: 2, ElementClass.TET: 6}.get(self, 1)

    @property
    def num_children(self) -> int:
        return 1 << self.dim

    @property
    def num_faces(self) -> int:
        return _NUM_FACES[self]

    @property
    def num_vertices(self) -> int:
        if self.is_simplex:
            return self.dim + 1
        return 1 << self.dim

    def face_class(self, face: int = 0) -> "ElementClass":
        return _FACE_CLASS[self]


_DIM = {
    ElementClass.VERTEX: 0,
    ElementClass.LINE: 1,
    ElementClass.QUAD: 2,
    ElementClass.HEX: 3,
    ElementClass.TRIANGLE: 2,
    ElementClass.TET: 3,
}
_NUM_FACES = {
    ElementClass.VERTEX: 0,
    ElementClass.LINE: 2,
    ElementClass.QUAD: 4,
    ElementClass.HEX: 6,
    ElementClass.TRIANGLE: 3,
    ElementClass.TET: 4,
}
_FACE_CLASS = {
    ElementClass.LINE: ElementClass.VERTEX,
    ElementClass.QUAD: ElementClass.LINE,
    ElementClass.HEX: ElementClass.QUAD,
    ElementClass.TRIANGLE: ElementClass.LINE,
    ElementClass.TET: ElementClass.TRIANGLE,
}

# Tree vertex indices spanned by each face, ascending.  The position of a
# vertex in this list is its corner number in the face's own reference shape.
FACE_VERTICES = {
    ElementClass.LINE: ((0,), (1,)),
    ElementClass.QUAD: ((0, 2), (1, 3), (0, 1), (2, 3)),
    ElementClass.HEX: ((0, 2, 4, 6), (1, 3, 5, 7), (0, 1, 4, 5), (2, 3, 6, 7),
                       (0, 1, 2, 3), (4, 5, 6, 7)),
    ElementClass.TRIANGLE: ((1, 2), (0, 2), (0, 1)),
    ElementClass.TET: ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)),
}


# ---------------------------------------------------------------------------
# Lookup tables for the simplices.  Index 2 = triangle, 3 = tetrahedron.

# Vertices of the reference simplex S_b as cube corners, bits ordered (z y x).
SIMPLEX_CORNERS = {
    2: np.array([[0, 1, 3], [0, 2, 3]]),
    3: np.array([[0, 1, 5, 7], [0, 1, 3, 7], [0, 2, 3, 7],
                 [0, 2, 6, 7], [0, 4, 6, 7], [0, 4, 5, 7]]),
}

# Types of the Bey children, rows = parent type.
CHILD_TYPES = {
    2: np.array([[0, 0, 0, 1], [1, 1, 1, 0]]),
    3: np.array([[0, 0, 0, 0, 4, 5, 2, 1],
                 [1, 1, 1, 1, 3, 2, 5, 0],
                 [2, 2, 2, 2, 0, 1, 4, 3],
                 [3, 3, 3, 3, 5, 4, 1, 2],
                 [4, 4, 4, 4, 2, 3, 0, 5],
                 [5, 5, 5, 5, 1, 0, 3, 4]]),
}

# Vertex j of the parent whose midpoint with vertex 0 anchors Bey child i.
BEY_ANCHOR_VERTEX = {
    2: np.array([0, 1, 2, 1]),
    3: np.array([0, 1, 2, 3, 1, 1, 2, 2]),
}

# Local (TM) index of the Bey child i, rows = parent type.  Rows 1 and 3 rank
# T4 after T5, as their (cube id, type) pairs require.
SIGMA = {
    2: np.array([[0, 1, 3, 2], [0, 2, 3, 1]]),
    3: np.array([[0, 1, 4, 7, 2, 3, 6, 5],
                 [0, 1, 5, 7, 3, 2, 6, 4],
                 [0, 3, 4, 7, 1, 2, 6, 5],
                 [0, 1, 6, 7, 3, 2, 4, 5],
                 [0, 3, 5, 7, 1, 2, 4, 6],
                 [0, 3, 6, 7, 2, 1, 4, 5]]),
}
SIGMA_INV = {d: np.argsort(s, axis=1) for d, s in SIGMA.items()}

# Parent type from (cube id, type); rows = cube id.
PARENT_TYPE = {
    2: np.array([[0, 1], [0, 0], [1, 1], [0, 1]]),
    3: np.array([[0, 1, 2, 3, 4, 5],
                 [0, 1, 1, 1, 0, 0],
                 [2, 2, 2, 3, 3, 3],
                 [1, 1, 2, 2, 2, 1],
                 [5, 5, 4, 4, 4, 5],
                 [0, 0, 0, 5, 5, 5],
                 [4, 3, 3, 3, 4, 4],
                 [0, 1, 2, 3, 4, 5]]),
}

# Local index from (type, cube id); rows = type.
ILOC_FROM_TYPE_CID = {
    2: np.array([[0, 1, 1, 3], [0, 2, 2, 3]]),
    3: np.array([[0, 1, 1, 4, 1, 4, 4, 7],
                 [0, 1, 2, 5, 2, 5, 4, 7],
                 [0, 2, 3, 4, 1, 6, 5, 7],
                 [0, 3, 1, 5, 2, 4, 6, 7],
                 [0, 2, 2, 6, 3, 5, 5, 7],
                 [0, 3, 3, 6, 3, 6, 6, 7]]),
}

# Cube id and type of the child with a given local index; rows = parent type.
CID_FROM_PTYPE_ILOC = {
    2: np.array([[0, 1, 1, 3], [0, 2, 2, 3]]),
    3: np.array([[0, 1, 1, 1, 5, 5, 5, 7],
                 [0, 1, 1, 1, 3, 3, 3, 7],
                 [0, 2, 2, 2, 3, 3, 3, 7],
                 [0, 2, 2, 2, 6, 6, 6, 7],
                 [0, 4, 4, 4, 6, 6, 6, 7],
                 [0, 4, 4, 4, 5, 5, 5, 7]]),
}
TYPE_FROM_PTYPE_ILOC = {
    2: np.array([[0, 0, 1, 0], [1, 0, 1, 1]]),
    3: np.array([[0, 0, 4, 5, 0, 1, 2, 0],
                 [1, 1, 2, 3, 0, 1, 5, 1],
                 [2, 0, 1, 2, 2, 3, 4, 2],
                 [3, 3, 4, 5, 1, 2, 3, 3],
                 [4, 2, 3, 4, 0, 4, 5, 4],
                 [5, 0, 1, 5, 3, 4, 5, 5]]),
}

# Axis permutation (i, j, k) per type used by the containment test.
CONTAIN_AXES = {
    2: np.array([[0, 1], [1, 0]]),
    3: np.array([[0, 1, 2], [0, 2, 1], [1, 2, 0],
                 [1, 0, 2], [2, 0, 1], [2, 1, 0]]),
}

# Local indices of the children touching each face; [type][face].
CHILDREN_AT_FACE = {
    2: np.array([[[1, 3], [0, 3], [0, 1]],
                 [[2, 3], [0, 3], [0, 2]]]),
    3: np.array([[[1, 4, 5, 7], [0, 4, 6, 7], [0, 1, 2, 7], [0, 1, 3, 4]],
                 [[1, 4, 5, 7], [0, 5, 6, 7], [0, 1, 3, 7], [0, 1, 2, 5]],
                 [[3, 4, 5, 7], [0, 4, 6, 7], [0, 1, 3, 7], [0, 2, 3, 4]],
                 [[1, 5, 6, 7], [0, 4, 6, 7], [0, 1, 3, 7], [0, 1, 2, 6]],
                 [[3, 5, 6, 7], [0, 4, 5, 7], [0, 1, 3, 7], [0, 2, 3, 5]],
                 [[3, 5, 6, 7], [0, 4, 6, 7], [0, 2, 3, 7], [0, 1, 3, 6]]]),
}
# Face map of a tetrahedral child whose type differs from its parent's.
MIDDLE_CHILD_FACE = np.array([0, 2, 1, 3])

# Tet root faces: element face -> root face for the types that can touch it.
TET_TREE_FACE = np.array([[0, 1, 2, 3],
                          [0, -1, -1, -1],
                          [-1, -1, 1, -1],
                          [-1, -1, -1, -1],
                          [-1, 2, -1, -1],
                          [-1, -1, -1, 3]])
# Inverse: root face -> element face of a boundary tet of that type.
TET_ELEMENT_FACE = {0: (0, 1, 2, 3), 1: (0, -1, -1, -1), 2: (-1, 2, -1, -1),
                    4: (-1, -1, 1, -1), 5: (-1, -1, -1, 3)}
# Type of the tetrahedron extruded from a type-1 boundary triangle.
TET_EXTRUDE_TYPE = np.array([1, 2, 4, 5])

# Handedness of the face frame relative to the outward normal.  Two glued faces
# map by a rotation (sign +1) exactly when their handedness differs.
FACE_HANDEDNESS = {
    ElementClass.HEX: (-1, 1, 1, -1, -1, 1),
    ElementClass.TET: (-1, 1, -1, 1),
}


def face_sign(class_a: ElementClass, face_a: int,
              class_b: ElementClass, face_b: int) -> int:
    """Rotation (+1) or reflection (-1) between two glued tree faces."""
    if class_a.dim < 3:
        return 1
    ha = FACE_HANDEDNESS[class_a][face_a]
    hb = FACE_HANDEDNESS[class_b][face_b]
    return 1 if ha * hb < 0 else -1


# ---------------------------------------------------------------------------
# Element identifiers


@dataclass(frozen=True, order=False)
class ElementKey:
    eclass: ElementClass
    anchor: tuple[int, ...]
    level: int
    btype: int = 0

    def __repr__(self) -> str:
        return (f"ElementKey({self.eclass.name}, {self.anchor}, "
                f"level={self.level}, type={self.btype})")


@dataclass(frozen=True)
class Elements:
    """A batch of elements of one class as parallel arrays."""

    eclass: ElementClass
    coords: np.ndarray  # (n, d) int64
    level: np.ndarray   # (n,) int64
    btype: np.ndarray   # (n,) int64

    def __len__(self) -> int:
        return len(self.level)

    def __getitem__(self, idx) -> "Elements":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return Elements(self.eclass, self.coords[idx], self.level[idx],
                        self.btype[idx])

    def key(self, i: int) -> ElementKey:
        return ElementKey(self.eclass, tuple(int(c) for c in self.coords[i]),
                          int(self.level[i]), int(self.btype[i]))

    def keys(self) -> list[ElementKey]:
        return [self.key(i) for i in range(len(self))]

    @classmethod
    def empty(cls, eclass: ElementClass) -> "Elements":
        return cls(eclass, np.zeros((0, eclass.dim), np.int64),
                   np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_keys(cls, keys: Sequence[ElementKey],
                  eclass: ElementClass | None = None) -> "Elements":
        if not keys:
            if eclass is None:
                raise ValueError("cannot infer class of an empty key list")
            return cls.empty(eclass)
        eclass = keys[0].eclass
        if any(k.eclass != eclass for k in keys):
            raise ValueError("mixed element classes")
        coords = np.array([k.anchor for k in keys], dtype=np.int64)
        coords = coords.reshape(len(keys), eclass.dim)
        return cls(eclass, coords,
                   np.array([k.level for k in keys], dtype=np.int64),
                   np.array([k.btype for k in keys], dtype=np.int64))

    @classmethod
    def concat(cls, parts: Iterable["Elements"],
               eclass: ElementClass | None = None) -> "Elements":
        parts = list(parts)
        if not parts:
            return cls.empty(eclass)
        return cls(parts[0].eclass,
                   np.concatenate([p.coords for p in parts]),
                   np.concatenate([p.level for p in parts]),
                   np.concatenate([p.btype for p in parts]))

    def replace(self, coords=None, level=None, btype=None) -> "Elements":
        return Elements(self.eclass,
                        self.coords if coords is None else coords,
                        self.level if level is None else level,
                        self.btype if btype is None else btype)

    def equal(self, other: "Elements") -> np.ndarray:
        return ((self.coords == other.coords).all(axis=1)
                & (self.level == other.level) & (self.btype == other.btype))


def _scalar_api(method):
    """Let a batch method also accept ElementKey arguments."""

    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        if not any(isinstance(a, ElementKey) for a in args):
            return method(self, *args, **kwargs)
        batch_args = [Elements.from_keys([a]) if isinstance(a, ElementKey) else a
                      for a in args]
        return _unbatch(method(self, *batch_args, **kwargs))

    return wrapper


def _unbatch(result):
    if isinstance(result, Elements):
        return result.key(0)
    if isinstance(result, tuple):
        return tuple(_unbatch(r) for r in result)
    if isinstance(result, np.ndarray):
        if result.ndim == 1:
            value = result[0]
            return bool(value) if result.dtype == bool else int(value)
        return result[0].tolist()
    return result


def _as_index(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.int64), (n,))


# ---------------------------------------------------------------------------
# Schemes


class Scheme:
    """Element arithmetic for one element class and maximum level."""

    def __init__(self, eclass: ElementClass, max_level: int = MAX_LEVEL):
        if eclass.dim * max_level > 63:
            raise ValueError("linear ids would not fit into 63 bits")
        self.eclass = ElementClass(eclass)
        self.max_level = max_level
        self.dim = self.eclass.dim
        self.num_children = self.eclass.num_children
        self.num_faces = self.eclass.num_faces
        self.root_len = 1 << max_level
        d = self.dim
        if self.eclass.is_simplex:
            self.corners = SIMPLEX_CORNERS[d]
            self.child_types = CHILD_TYPES[d]
            self.bey_anchor = BEY_ANCHOR_VERTEX[d]
            self.sigma = SIGMA[d]
            self.sigma_inv = SIGMA_INV[d]
            self.parent_type = PARENT_TYPE[d]
            self.iloc = ILOC_FROM_TYPE_CID[d]
            self.cid_from_iloc = CID_FROM_PTYPE_ILOC[d]
            self.type_from_iloc = TYPE_FROM_PTYPE_ILOC[d]
            self.axes = CONTAIN_AXES[d]
            self.children_face_table = CHILDREN_AT_FACE[d]
        # bit offsets of a cube id: corner c -> unit offset per axis
        self.corner_bits = np.array([[(c >> a) & 1 for a in range(d)]
                                     for c in range(1 << d)], dtype=np.int64)
        self.corner_bits = self.corner_bits.reshape(1 << d, d)

    def __repr__(self) -> str:
        return f"Scheme({self.eclass.name}, max_level={self.max_level})"

    @functools.cached_property
    def face_scheme(self) -> "Scheme":
        return get_scheme(self.eclass.face_class(), self.max_level)

    # -- construction -----------------------------------------------------

    def root(self) -> ElementKey:
        return ElementKey(self.eclass, (0,) * self.dim, 0, 0)

    def make(self, coords, level, btype=0) -> Elements:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.dim)
        n = len(coords)
        return Elements(self.eclass, coords,
                        _as_index(level, n).copy(), _as_index(btype, n).copy())

    def edge_length(self, level) -> np.ndarray:
        return np.left_shift(np.int64(1), self.max_level - np.asarray(level, np.int64))

    def _check_class(self, elems: Elements) -> None:
        if elems.eclass != self.eclass:
            raise ValueError(f"{self!r} got elements of class {elems.eclass.name}")

    # -- basic queries ------------------------------------------------------

    @_scalar_api
    def cube_id(self, elems: Elements, at_level=None) -> np.ndarray:
        """Interleaved anchor bits (z y x) at the requested level."""
        at_level = elems.level if at_level is None else _as_index(at_level, len(elems))
        if np.any(at_level < 1) or np.any(at_level > elems.level):
            raise ValueError("cube_id level must lie in [1, element level]")
        shift = (self.max_level - at_level)[:, None]
        bits = (elems.coords >> shift) & 1
        return (bits << np.arange(self.dim, dtype=np.int64)).sum(axis=1)

    def _cube_id_unchecked(self, coords, at_level) -> np.ndarray:
        shift = (self.max_level - at_level)[:, None]
        bits = (coords >> shift) & 1
        return (bits << np.arange(self.dim, dtype=np.int64)).sum(axis=1)

    @_scalar_api
    def vertices(self, elems: Elements) -> np.ndarray:
        """Lattice coordinates of all vertices, shape (n, nverts, d)."""
        h = self.edge_length(elems.level)[:, None, None]
        if self.eclass.is_simplex:
            corners = self.corners[elems.btype]           # (n, d+1)
            offsets = self.corner_bits[corners]           # (n, d+1, d)
        else:
            offsets = self.corner_bits[None, :, :]
        return elems.coords[:, None, :] + h * offsets

    def coordinates(self, key: ElementKey) -> list[tuple[int, ...]]:
        verts = self.vertices(Elements.from_keys([key]))[0]
        return [tuple(int(c) for c in v) for v in verts]

    # -- parent / child -----------------------------------------------------

    @_scalar_api
    def parent(self, elems: Elements) -> Elements:
        if np.any(elems.level < 1):
            raise ValueError("root has no parent")
        h = self.edge_length(elems.level)[:, None]
        coords = elems.coords & ~h
        if self.eclass.is_simplex:
            cid = self._cube_id_unchecked(elems.coords, elems.level)
            btype = self.parent_type[cid, elems.btype]
        else:
            btype = elems.btype
        return Elements(self.eclass, coords, elems.level - 1, btype)

    @_scalar_api
    def ancestor(self, elems: Elements, level) -> Elements:
        """Ancestor at the given level (level <= element level)."""
        level = _as_index(level, len(elems))
        if np.any(level > elems.level) or np.any(level < 0):
            raise ValueError("ancestor level must lie in [0, element level]")
        btype = elems.btype.copy()
        if self.eclass.is_simplex and len(elems):
            for lev in range(int(elems.level.max()), 0, -1):
                active = (elems.level >= lev) & (level < lev)
                if not active.any():
                    continue
                cid = self._cube_id_unchecked(elems.coords[active],
                                              np.full(active.sum(), lev))
                btype[active] = self.parent_type[cid, btype[active]]
        mask = ~(self.edge_length(level) - 1)
        return Elements(self.eclass, elems.coords & mask[:, None], level.copy(), btype)

    @_scalar_api
    def child(self, elems: Elements, i, ordering: str = "tm") -> Elements:
        if np.any(elems.level >= self.max_level):
            raise ValueError("maximum level reached")
        i = _as_index(i, len(elems))
        if np.any((i < 0) | (i >= self.num_children)):
            raise ValueError("child index out of range")
        if not self.eclass.is_simplex:
            hc = self.edge_length(elems.level + 1)[:, None]
            coords = elems.coords + hc * self.corner_bits[i]
            return Elements(self.eclass, coords, elems.level + 1, elems.btype.copy())
        if ordering == "tm":
            bey = self.sigma_inv[elems.btype, i]
        elif ordering == "bey":
            bey = i
        else:
            raise ValueError(f"unknown child ordering {ordering!r}")
        verts = self.vertices(elems)
        j = self.bey_anchor[bey]
        coords = (verts[:, 0, :] + verts[np.arange(len(elems)), j, :]) >> 1
        btype = self.child_types[elems.btype, bey]
        return Elements(self.eclass, coords, elems.level + 1, btype)

    @_scalar_api
    def children(self, elems: Elements) -> Elements:
        """All TM children, element-major order."""
        n, k = len(elems), self.num_children
        rep = elems[np.repeat(np.arange(n), k)]
        return self.child(rep, np.tile(np.arange(k), n))

    def children_list(self, key: ElementKey) -> list[ElementKey]:
        return self.children(Elements.from_keys([key])).keys()

    @_scalar_api
    def child_id(self, elems: Elements) -> np.ndarray:
        if np.any(elems.level < 1):
            raise ValueError("root has no child id")
        cid = self._cube_id_unchecked(elems.coords, elems.level)
        if not self.eclass.is_simplex:
            return cid
        return self.iloc[elems.btype, cid]

    # -- face neighbours ----------------------------------------------------

    @_scalar_api
    def face_neighbor_inside(self, elems: Elements, face) -> tuple[Elements, np.ndarray]:
        """Same-level neighbour across ``face`` in the ambient lattice."""
        n = len(elems)
        f = _as_index(face, n)
        if np.any((f < 0) | (f >= self.num_faces)):
            raise ValueError("face index out of range")
        h = self.edge_length(elems.level)
        coords = elems.coords.copy()
        rows = np.arange(n)
        if not self.eclass.is_simplex:
            axis, side = f // 2, f % 2
            coords[rows, axis] += np.where(side == 1, h, -h)
            return Elements(self.eclass, coords, elems.level.copy(),
                            elems.btype.copy()), f ^ 1
        b = elems.btype
        if self.dim == 2:
            # type 0 moves x at f=0 and y at f=2; type 1 the other way round
            axis = np.where(f == 0, b, 1 - b)
            step = np.where(f == 0, h, np.where(f == 2, -h, 0))
            coords[rows, axis] += step
            return Elements(self.eclass, coords, elems.level.copy(), 1 - b), 2 - f
        nb = b.copy()
        mid = (f == 1) | (f == 2)
        up = ((b % 2 == 0) & (f == 2)) | ((b % 2 == 1) & (f == 1))
        nb = np.where(mid & up, b + 1, np.where(mid, b - 1, nb))
        f0 = f == 0
        coords[rows[f0], b[f0] // 2] += h[f0]
        nb = np.where(f0, b + np.where(b % 2 == 1, 2, 4), nb)
        f3 = f == 3
        coords[rows[f3], ((b[f3] + 3) % 6) // 2] -= h[f3]
        nb = np.where(f3, b + np.where(b % 2 == 0, 2, 4), nb)
        dual = np.where(mid, f, 3 - f)
        return Elements(self.eclass, coords, elems.level.copy(), nb % 6), dual

    # -- containment --------------------------------------------------------

    @_scalar_api
    def is_descendant(self, n_elems: Elements, t_elems: Elements) -> np.ndarray:
        """True where n is a descendant of (or equal to) t."""
        if np.any(n_elems.level < t_elems.level):
            raise ValueError("containment needs n.level >= t.level")
        h = self.edge_length(t_elems.level)
        dx = n_elems.coords - t_elems.coords
        if not self.eclass.is_simplex:
            return ((dx >= 0) & (dx < h[:, None])).all(axis=1)
        rows = np.arange(len(dx))
        b, nb = t_elems.btype, n_elems.btype
        ax = self.axes[b]
        di = dx[rows, ax[:, 0]]
        dj = dx[rows, ax[:, 1]]
        if self.dim == 2:
            outside = ((di >= h) | (dj < 0) | (dj - di > 0)
                       | ((di == dj) & (nb == 1 - b)))
            return ~outside
        dk = dx[rows, ax[:, 2]]
        # signed type distance in {-3..2}
        diff = (nb - b) % 6
        plus = (diff >= 1) & (diff <= 3)
        minus = (diff >= 3) & (diff <= 5)
        even = b % 2 == 0
        outside = ((di >= h) | (dj < 0) | (dk - di > 0) | (dj - dk > 0)
                   | ((dj == dk) & np.where(even, plus, minus))
                   | ((dk == di) & np.where(even, minus, plus))
                   | ((dj == dk) & (dk == di) & (nb != b)))
        return ~outside

    @_scalar_api
    def inside_root(self, elems: Elements) -> np.ndarray:
        n = len(elems)
        root = Elements(self.eclass, np.zeros((n, self.dim), np.int64),
                        np.zeros(n, np.int64), np.zeros(n, np.int64))
        return self.is_descendant(elems, root)

    # -- linear index -------------------------------------------------------

    @_scalar_api
    def consecutive_index(self, elems: Elements, check: bool = True) -> np.ndarray:
        """Index among the uniform elements of the same level, in SFC order."""
        if check and not np.all(self.inside_root(elems)):
            raise ValueError("element lies outside the root")
        d = self.dim
        level = elems.level
        shift = self.max_level - level
        if not self.eclass.is_simplex:
            scaled = elems.coords >> shift[:, None]
            return _interleave(scaled, int(level.max()) if len(level) else 0)
        index = np.zeros(len(elems), np.int64)
        btype = elems.btype.copy()
        top = int(level.max()) if len(level) else 0
        for lev in range(top, 0, -1):
            active = level >= lev
            cid = self._cube_id_unchecked(elems.coords, np.full(len(elems), lev))
            iloc = self.iloc[btype, cid]
            index += np.where(active, iloc << (d * (level - lev)).clip(0), 0)
            btype = np.where(active, self.parent_type[cid, btype], btype)
        return index

    def element_from_index(self, index, level) -> Elements | ElementKey:
        """Inverse of :meth:`consecutive_index` at a given level."""
        scalar = np.isscalar(index)
        index = np.atleast_1d(np.asarray(index, dtype=np.int64))
        level = _as_index(level, len(index))
        if np.any(level < 0) or np.any(level > self.max_level):
            raise ValueError("level out of range")
        limit = np.left_shift(np.int64(1), self.dim * level)
        if np.any(index < 0) or np.any(index >= limit):
            raise ValueError("index out of range for level")
        d = self.dim
        n = len(index)
        coords = np.zeros((n, d), np.int64)
        btype = np.zeros(n, np.int64)
        top = int(level.max()) if n else 0
        for lev in range(1, top + 1):
            active = level >= lev
            digit = (index >> (d * (level - lev)).clip(0)) & ((1 << d) - 1)
            if self.eclass.is_simplex:
                cid = self.cid_from_iloc[btype, digit]
                btype = np.where(active, self.type_from_iloc[btype, digit], btype)
            else:
                cid = digit
            bits = self.corner_bits[cid] << (self.max_level - lev)
            coords += np.where(active[:, None], bits, 0)
        out = Elements(self.eclass, coords, level.copy(), btype)
        return out.key(0) if scalar else out

    @_scalar_api
    def linear_id(self, elems: Elements) -> np.ndarray:
        """Consecutive index of the first descendant at the maximum level."""
        index = self.consecutive_index(elems, check=False)
        return index << (self.dim * (self.max_level - elems.level))

    def successor(self, key: ElementKey, stats: dict | None = None) -> ElementKey:
        return self._step(key, +1, stats)

    def predecessor(self, key: ElementKey, stats: dict | None = None) -> ElementKey:
        return self._step(key, -1, stats)

    def _step(self, key: ElementKey, delta: int, stats) -> ElementKey:
        if key.level == 0:
            raise IndexError("the root has no successor or predecessor")
        coords = list(key.anchor)
        btype = key.btype
        nchild = self.num_children
        simplex = self.eclass.is_simplex
        L = self.max_level

        def cid_at(level):
            bit = L - level
            return sum(((coords[a] >> bit) & 1) << a for a in range(self.dim))

        def set_cid(level, cid):
            bit = L - level
            for a in range(self.dim):
                coords[a] = (coords[a] & ~(1 << bit)) | (((cid >> a) & 1) << bit)

        def recurse(level, btype):
            # returns the type of the updated element at `level`
            if level == 0:
                raise IndexError("successor/predecessor out of range")
            if stats is not None:
                stats["calls"] = stats.get("calls", 0) + 1
            cid = cid_at(level)
            iloc = int(self.iloc[btype, cid]) if simplex else cid
            nxt = (iloc + delta) % nchild
            wrapped = nxt == (0 if delta > 0 else nchild - 1)
            if wrapped:
                ptype = int(self.parent_type[cid, btype]) if simplex else 0
                ptype = recurse(level - 1, ptype)
            else:
                ptype = int(self.parent_type[cid, btype]) if simplex else 0
            if simplex:
                new_cid = int(self.cid_from_iloc[ptype, nxt])
                new_type = int(self.type_from_iloc[ptype, nxt])
            else:
                new_cid, new_type = nxt, 0
            set_cid(level, new_cid)
            return new_type

        btype = recurse(key.level, btype)
        return ElementKey(self.eclass, tuple(coords), key.level, btype)

    # -- TM index digits ----------------------------------------------------

    def tm_index(self, key: ElementKey) -> list[tuple[int, int]]:
        """Digits (cube id, type) of levels 1..L; zero beyond the key's level."""
        digits = [(0, 0)] * self.max_level
        btype = key.btype
        elems = Elements.from_keys([key])
        for lev in range(key.level, 0, -1):
            cid = int(self._cube_id_unchecked(elems.coords, np.array([lev]))[0])
            digits[lev - 1] = (cid, btype)
            if self.eclass.is_simplex:
                btype = int(self.parent_type[cid, btype])
        return digits

    def is_valid_tm(self, digits: Sequence[tuple[int, int]], level: int) -> bool:
        """True if some element has these TM digits up to ``level``."""
        parent = 0
        for cid, btype in digits[:level]:
            if not (0 <= cid < self.num_children and 0 <= btype < self.eclass.type_count):
                return False
            expected = int(self.parent_type[cid, btype]) if self.eclass.is_simplex else 0
            if expected != parent:
                return False
            parent = btype
        return True

    def tm_embed(self, key: ElementKey) -> tuple[tuple[int, ...], int]:
        """Anchor and level of the cube that embeds a simplex.

        The cube has dimension ``d + bits(type)``; its leading coordinates
        collect the type bits of all ancestors, the trailing ones are the anchor.
        """
        if not self.eclass.is_simplex:
            raise ValueError("tm_embed needs a simplex class")
        type_bits = 3 if self.dim == 3 else 1
        extra = [0] * type_bits
        L = self.max_level
        for lev, (_, btype) in enumerate(self.tm_index(key)[:key.level], start=1):
            for j in range(type_bits):
                extra[j] |= ((btype >> j) & 1) << (L - lev)
        return tuple(extra) + tuple(key.anchor), key.level

    # -- descendants ----------------------------------------------------------

    @_scalar_api
    def first_descendant(self, elems: Elements, level=None) -> Elements:
        level = self._target_level(elems, level)
        if not self.eclass.is_simplex:
            return elems.replace(level=level.copy())
        # TM child 0 keeps anchor and type
        return elems.replace(level=level.copy(), btype=elems.btype.copy())

    @_scalar_api
    def last_descendant(self, elems: Elements, level=None) -> Elements:
        level = self._target_level(elems, level)
        # TM child 2^d - 1 keeps the type and moves the anchor to the far corner
        shift = self.edge_length(elems.level) - self.edge_length(level)
        coords = elems.coords + shift[:, None]
        return elems.replace(coords=coords, level=level.copy())

    def _target_level(self, elems, level) -> np.ndarray:
        level = np.full(len(elems), self.max_level) if level is None \
            else _as_index(level, len(elems))
        if np.any(level > self.max_level):
            raise ValueError("descendant level exceeds the maximum level")
        if np.any(level < elems.level):
            raise ValueError("descendant level below element level")
        return level

    @_scalar_api
    def children_at_face(self, elems: Elements, face) -> np.ndarray:
        """Child indices touching ``face``, shape (n, 2^(d-1)), ascending."""
        f = _as_index(face, len(elems))
        if not self.eclass.is_simplex:
            axis, side = f // 2, f % 2
            ids = np.arange(self.num_children)
            table = np.array([[c for c in ids if ((c >> (g // 2)) & 1) == g % 2]
                              for g in range(self.num_faces)], dtype=np.int64)
            return table[f]
        return self.children_face_table[elems.btype, f]

    @_scalar_api
    def child_face(self, elems: Elements, child_index, face) -> np.ndarray:
        """Face of child ``child_index`` that lies on the parent's ``face``."""
        n = len(elems)
        f = _as_index(face, n)
        ci = _as_index(child_index, n)
        at_face = self.children_at_face(elems, f)
        if not (at_face == ci[:, None]).any(axis=1).all():
            raise ValueError("child does not touch the face")
        if self.dim < 3 or not self.eclass.is_simplex:
            return f.copy()
        ctype = self.type_from_iloc[elems.btype, ci]
        return np.where(ctype == elems.btype, f, MIDDLE_CHILD_FACE[f])

    def children_at_face_keys(self, key: ElementKey, face: int) -> list[ElementKey]:
        ids = self.children_at_face(key, face)
        return [self.child(key, i) for i in ids]

    @_scalar_api
    def first_face_descendant(self, elems: Elements, face, level=None) -> Elements:
        return self._face_descendant(elems, face, level, 0)

    @_scalar_api
    def last_face_descendant(self, elems: Elements, face, level=None) -> Elements:
        return self._face_descendant(elems, face, level, -1)

    def _face_descendant(self, elems, face, level, pick):
        level = self._target_level(elems, level)
        f = _as_index(face, len(elems)).copy()
        cur = elems
        top = int(level.max()) if len(level) else 0
        for _ in range(top - int(elems.level.min() if len(level) else 0)):
            active = cur.level < level
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            sub = cur[idx]
            ci = self.children_at_face(sub, f[idx])[:, pick]
            nf = self.child_face(sub, ci, f[idx])
            kid = self.child(sub, ci)
            coords, lv, bt = cur.coords.copy(), cur.level.copy(), cur.btype.copy()
            coords[idx], lv[idx], bt[idx] = kid.coords, kid.level, kid.btype
            f[idx] = nf
            cur = Elements(self.eclass, coords, lv, bt)
        return cur

    # -- root boundary --------------------------------------------------------

    @_scalar_api
    def tree_face(self, elems: Elements, face) -> np.ndarray:
        """Root face containing element face ``face``; -1 where undefined."""
        f = _as_index(face, len(elems))
        if self.eclass == ElementClass.TET:
            return TET_TREE_FACE[elems.btype, f]
        if self.eclass == ElementClass.TRIANGLE:
            return np.where(elems.btype == 0, f, -1)
        return f.copy()

    def element_face_at_root(self, btype, root_face) -> np.ndarray:
        """Element face lying on ``root_face`` for a boundary element of ``btype``."""
        btype = np.asarray(btype, np.int64)
        g = np.broadcast_to(np.asarray(root_face, np.int64), btype.shape)
        if self.eclass != ElementClass.TET:
            return g.copy()
        table = np.full((6, 4), -1, np.int64)
        for b, row in TET_ELEMENT_FACE.items():
            table[b] = row
        return table[btype, g]

    @_scalar_api
    def boundary_face(self, elems: Elements, face) -> Elements:
        """The element's face on the root boundary as a face-class element."""
        n = len(elems)
        f = _as_index(face, n)
        c = elems.coords
        fs = self.face_scheme
        zero = np.zeros(n, np.int64)
        if self.eclass == ElementClass.LINE:
            return Elements(fs.eclass, np.zeros((n, 0), np.int64), elems.level.copy(), zero)
        if self.eclass == ElementClass.QUAD:
            x = np.where(f < 2, c[:, 1], c[:, 0])
            return Elements(fs.eclass, x[:, None], elems.level.copy(), zero)
        if self.eclass == ElementClass.HEX:
            a = np.where(f < 2, c[:, 1], c[:, 0])
            b = np.where(f < 4, c[:, 2], c[:, 1])
            return Elements(fs.eclass, np.stack([a, b], axis=1), elems.level.copy(), zero)
        if self.eclass == ElementClass.TRIANGLE:
            x = np.where(f == 0, c[:, 1], c[:, 0])
            return Elements(fs.eclass, x[:, None], elems.level.copy(), zero)
        g = self.tree_face(elems, f)
        cat1 = g < 2
        a = np.where(cat1, c[:, 2], c[:, 0])
        b = np.where(cat1, c[:, 1], c[:, 2])
        ftype = np.where(elems.btype == 0, 0, 1)
        return Elements(fs.eclass, np.stack([a, b], axis=1), elems.level.copy(), ftype)

    @_scalar_api
    def transform_face(self, faces: Elements, orientation, sign: int = 1,
                       first: bool = True) -> Elements:
        """Map face coordinates of one tree face onto its glued partner.

        ``first`` tells whether the calling side is the face whose corner 0
        defines the orientation; otherwise the inverse map is applied.
        This method runs on the *face* scheme.
        """
        n = len(faces)
        o = _as_index(orientation, n).copy()
        sign = np.broadcast_to(np.asarray(sign, np.int64), (n,))
        cls = self.eclass
        if not first:
            rotate = sign > 0
            if cls in (ElementClass.QUAD, ElementClass.TRIANGLE):
                o = np.where(rotate & (o == 1), 2, np.where(rotate & (o == 2), 1, o))
        h = self.edge_length(faces.level)
        R = self.root_len
        c = faces.coords.copy()
        t = faces.btype.copy()
        if cls == ElementClass.VERTEX:
            return faces.replace(coords=c.copy())
        if cls == ElementClass.LINE:
            x = np.where(o == 1, R - c[:, 0] - h, c[:, 0])
            return faces.replace(coords=x[:, None])
        if cls == ElementClass.QUAD:
            x, y = c[:, 0], c[:, 1]
            refl = sign < 0
            x, y = np.where(refl, y, x), np.where(refl, x, y)
            nx = np.select([o == 1, o == 2, o == 3], [R - y - h, y, R - x - h], x)
            ny = np.select([o == 1, o == 2, o == 3], [x, R - x - h, R - y - h], y)
            return faces.replace(coords=np.stack([nx, ny], axis=1))
        if cls == ElementClass.TRIANGLE:
            x, y = c[:, 0], c[:, 1]
            refl = sign < 0
            y = np.where(refl, x - y - np.where(t == 1, h, 0), y)
            t1 = np.where(t == 1, h, 0)
            nx = np.select([o == 1, o == 2], [R - y - h, R - x + y - h + t1], x)
            ny = np.select([o == 1, o == 2], [x - y - t1, R - x - h], y)
            return faces.replace(coords=np.stack([nx, ny], axis=1))
        raise ValueError(f"no face transform for {cls.name}")

    @_scalar_api
    def extrude_face(self, faces: Elements, root_face) -> Elements:
        """Element of this class whose boundary face at ``root_face`` is given."""
        if faces.eclass != self.eclass.face_class():
            raise ValueError("face class does not match the target class")
        n = len(faces)
        g = _as_index(root_face, n)
        h = self.edge_length(faces.level)
        far = self.root_len - h
        c = faces.coords
        zero = np.zeros(n, np.int64)
        cls = self.eclass
        if cls == ElementClass.LINE:
            x = np.where(g == 0, 0, far)
            return Elements(cls, x[:, None], faces.level.copy(), zero)
        if cls == ElementClass.QUAD:
            fx = c[:, 0]
            x = np.select([g == 0, g == 1], [zero, far], fx)
            y = np.select([g == 0, g == 1, g == 2], [fx, fx, zero], far)
            return Elements(cls, np.stack([x, y], axis=1), faces.level.copy(), zero)
        if cls == ElementClass.TRIANGLE:
            fx = c[:, 0]
            x = np.where(g == 0, far, fx)
            y = np.select([g == 0, g == 1], [fx, fx], zero)
            return Elements(cls, np.stack([x, y], axis=1), faces.level.copy(), zero)
        if cls == ElementClass.HEX:
            a, b = c[:, 0], c[:, 1]
            x = np.select([g == 0, g == 1], [zero, far], a)
            y = np.select([g < 2, g == 2, g == 3], [a, zero, far], b)
            z = np.select([g < 4, g == 4], [b, zero], far)
            return Elements(cls, np.stack([x, y, z], axis=1), faces.level.copy(), zero)
        a, b = c[:, 0], c[:, 1]
        x = np.where(g == 0, far, a)
        y = np.where(g == 3, zero, b)
        z = np.select([g == 0, g == 1, g == 2], [a, a, b], b)
        btype = np.where(faces.btype == 0, 0, TET_EXTRUDE_TYPE[g])
        return Elements(cls, np.stack([x, y, z], axis=1), faces.level.copy(), btype)

    # -- families and ordering ------------------------------------------------

    def is_family(self, keys: Sequence[ElementKey]) -> bool:
        if any(k.eclass != self.eclass for k in keys):
            raise ValueError("mixed element classes")
        if len(keys) != self.num_children:
            return False
        level = keys[0].level
        if level == 0 or any(k.level != level for k in keys):
            return False
        elems = Elements.from_keys(list(keys))
        parents = self.parent(elems)
        if not parents.equal(parents[np.zeros(len(keys), np.int64)]).all():
            return False
        return bool((self.child_id(elems) == np.arange(self.num_children)).all())

    @_scalar_api
    def nca(self, a: Elements, b: Elements) -> Elements:
        """Nearest common ancestor."""
        diff = np.bitwise_or.reduce(a.coords ^ b.coords, axis=1)
        bitlen = np.zeros(len(a), np.int64)
        for bit in range(self.max_level + 1):
            bitlen = np.where((diff >> bit) > 0, bit + 1, bitlen)
        level = np.minimum(np.minimum(a.level, b.level), self.max_level - bitlen)
        while True:
            aa = self.ancestor(a, level)
            bb = self.ancestor(b, level)
            same = aa.btype == bb.btype
            if same.all():
                return aa
            level = np.where(same, level, level - 1)

    @_scalar_api
    def sfc_key(self, elems: Elements) -> tuple[np.ndarray, np.ndarray]:
        return self.linear_id(elems), elems.level.copy()

    def compare(self, a: ElementKey, b: ElementKey) -> int:
        if a.eclass != b.eclass:
            raise ValueError("mixed element classes")
        ka = (int(self.linear_id(a)), a.level)
        kb = (int(self.linear_id(b)), b.level)
        if ka == kb and (a.anchor != b.anchor or a.btype != b.btype):
            raise ValueError("distinct keys with identical SFC position")
        return (ka > kb) - (ka < kb)


def _interleave(scaled: np.ndarray, nbits: int) -> np.ndarray:
    d = scaled.shape[1]
    out = np.zeros(len(scaled), np.int64)
    for bit in range(nbits):
        for a in range(d):
            out |= ((scaled[:, a] >> bit) & 1) << (d * bit + a)
    return out


@functools.lru_cache(maxsize=None)
def get_scheme(eclass: ElementClass, max_level: int = MAX_LEVEL) -> Scheme:
    return Scheme(ElementClass(eclass), max_level)


def uniform_elements(scheme: Scheme, level: int) -> Elements:
    """All inside-root elements of one level, in SFC order."""
    count = 1 << (scheme.dim * level)
    return scheme.element_from_index(np.arange(count, dtype=np.int64), level)
