import functools

import numpy as np
import pytest

from amrforest.element_schemes import ElementClass, Elements, Scheme

ALL_CLASSES = [ElementClass.LINE, ElementClass.QUAD, ElementClass.HEX,
               ElementClass.TRIANGLE, ElementClass.TET]
SIMPLICES = [ElementClass.TRIANGLE, ElementClass.TET]


@functools.lru_cache(maxsize=None)
def levels_by_children(eclass, max_level, depth):
    """Uniform levels 0..depth built only through repeated TM children."""
    scheme = Scheme(eclass, max_level)
    levels = [Elements.from_keys([scheme.root()])]
    for _ in range(depth):
        levels.append(scheme.children(levels[-1]))
    return scheme, levels


def on_plane(points, plane_points):
    """Exact test that all points lie in the affine hull of plane_points."""
    p0 = np.asarray(plane_points[0])
    dim = len(p0)
    pts = np.asarray(points) - p0
    if dim == 1:
        return bool((pts == 0).all())
    if dim == 2:
        v = np.asarray(plane_points[1]) - p0
        return bool((v[0] * pts[:, 1] - v[1] * pts[:, 0] == 0).all())
    normal = np.cross(np.asarray(plane_points[1]) - p0,
                      np.asarray(plane_points[2]) - p0)
    return bool((pts @ normal == 0).all())


@pytest.fixture(params=ALL_CLASSES, ids=lambda c: c.name.lower())
def eclass(request):
    return request.param


def random_tree_sets(rng, num_trees, num_ranks):
    """Tree sets induced by cutting a random weighted leaf sequence."""
    leaves = rng.integers(1, 4, size=num_trees)
    owner_tree = np.repeat(np.arange(num_trees), leaves)
    N = len(owner_tree)
    mode = rng.integers(0, 3)
    if mode == 0:
        cuts = np.sort(rng.integers(0, N + 1, size=num_ranks - 1))
    elif mode == 1:
        cuts = (np.arange(1, num_ranks) * N) // num_ranks
    else:
        # clustered cuts give many empty ranks and shared trees
        cuts = np.sort(rng.integers(N // 3, N // 3 + 3, size=num_ranks - 1).clip(0, N))
    bounds = np.concatenate([[0], cuts, [N]])
    return [sorted(set(owner_tree[bounds[p]:bounds[p + 1]].tolist())) for p in range(num_ranks)]
