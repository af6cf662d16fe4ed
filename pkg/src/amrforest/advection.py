"""First-order upwind finite-volume advection of a level-set function on adaptive forests."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import forest as F
from .cmesh import CoarseMesh
from .element_schemes import FACE_VERTICES, ElementClass, Elements
from .vranks import RankWorld, allgather


class InstabilityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Flows and initial conditions


@dataclass(frozen=True)
class FlowField:
    """Velocity field u(x, t).

    kinds: ``zero``, ``constant`` (uses ``velocity``), ``rotation2d``
    (rotation about (0.5, 0.5), one turn per unit time) and ``cube3d``
    (a divergence-free swirl with no normal flow on the unit cube
    boundary, reversed from t = 0.5 on).
    """

    kind: str
    velocity: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "rotation2d", "cube3d"):
            raise ValueError(f"unknown flow {self.kind!r}")
        if self.kind == "constant" and not self.velocity:
            raise ValueError("constant flow needs a velocity")

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            v = np.asarray(self.velocity, float)
            return np.broadcast_to(v, x.shape).copy()
        if self.kind == "rotation2d":
            u = np.empty_like(x)
            u[:, 0] = 2 * math.pi * (x[:, 1] - 0.5)
            u[:, 1] = -2 * math.pi * (x[:, 0] - 0.5)
            return u
        f = np.sin(math.pi * x)
        df = math.pi * np.cos(math.pi * x)
        u = np.empty_like(x)
        u[:, 0] = f[:, 0] * (df[:, 1] - df[:, 2])
        u[:, 1] = -df[:, 0] * f[:, 1]
        u[:, 2] = df[:, 0] * f[:, 2]
        return u if t < 0.5 else -u


@dataclass(frozen=True)
class LevelSetInit:
    """Signed distance to a circle (2D) or sphere (3D)."""

    kind: str = "circle"
    center: tuple[float, ...] = (0.6, 0.6)
    radius: float = 0.25

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        c = np.asarray(self.center, float)
        if c.shape[0] != x.shape[1]:
            raise ValueError("level-set center and points differ in dimension")
        return np.sqrt(((x - c) ** 2).sum(axis=1)) - self.radius

    @classmethod
    def for_dim(cls, dim: int) -> "LevelSetInit":
        if dim == 2:
            return cls("circle", (0.6, 0.6), 0.25)
        return cls("sphere", (0.6, 0.6, 0.6), 0.25)


@dataclass
class SolverConfig:
    level: int
    rlevels: int = 0
    cfl: float = 0.5
    band: float = 4.0
    end_time: float = 1.0
    ranks: int = 1
    balance: bool = True
    min_volume: float = 0.0
    adapt_period: int | None = None
    ghost_version: str = "v2"

    def __post_init__(self):
        if self.cfl <= 0:
            raise ValueError("CFL number must be positive")
        if self.level < 0 or self.rlevels < 0:
            raise ValueError("levels must be nonnegative")
        if self.end_time <= 0:
            raise ValueError("end time must be positive")
        if self.adapt_period is not None and self.adapt_period < 1:
            raise ValueError("adapt period must be at least 1")

    @property
    def period(self) -> int:
        # mesh changes about once per element crossing time
        if self.adapt_period is not None:
            return self.adapt_period
        return max(1, int(round(1.0 / self.cfl)))


@dataclass
class StepStats:
    step: int
    t: float
    elements: int
    ghosts: int
    e_vol: float
    integral: float
    runtimes: dict[str, float] = field(default_factory=dict)


DETERMINISTIC_FIELDS = ["step", "t", "elements", "e_vol", "integral"]


def stats_csv(stats: list[StepStats], rank_dependent: bool = False) -> str:
    """Per-step CSV; ghost counts and timings only with ``rank_dependent``."""
    buf = io.StringIO()
    cols = list(DETERMINISTIC_FIELDS)
    phases = sorted({k for s in stats for k in s.runtimes}) if rank_dependent else []
    if rank_dependent:
        cols += ["ghosts"] + phases
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for s in stats:
        row = [s.step, repr(s.t), s.elements, repr(s.e_vol), repr(s.integral)]
        if rank_dependent:
            row += [s.ghosts] + [f"{s.runtimes.get(k, 0.0):.6f}" for k in phases]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Geometry


def _det(cols: list[np.ndarray]) -> np.ndarray:
    if len(cols) == 2:
        a, b = cols
        return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    a, b, c = cols
    return (a[:, 0] * (b[:, 1] * c[:, 2] - b[:, 2] * c[:, 1])
            - a[:, 1] * (b[:, 0] * c[:, 2] - b[:, 2] * c[:, 0])
            + a[:, 2] * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]))


def _mean_points(pts: np.ndarray) -> np.ndarray:
    # fixed summation order over the vertex axis
    out = pts[:, 0].copy()
    for k in range(1, pts.shape[1]):
        out += pts[:, k]
    return out / pts.shape[1]


def element_volume(eclass: ElementClass, verts: np.ndarray) -> np.ndarray:
    v0 = verts[:, 0]
    if eclass == ElementClass.TRIANGLE:
        return np.abs(_det([verts[:, 1] - v0, verts[:, 2] - v0])) / 2
    if eclass == ElementClass.TET:
        return np.abs(_det([verts[:, 1] - v0, verts[:, 2] - v0, verts[:, 3] - v0])) / 6
    if eclass == ElementClass.QUAD:
        return np.abs(_det([verts[:, 1] - v0, verts[:, 2] - v0]))
    if eclass == ElementClass.HEX:
        return np.abs(_det([verts[:, 1] - v0, verts[:, 2] - v0, verts[:, 4] - v0]))
    raise ValueError(f"advection needs 2D or 3D elements, got {eclass.name}")


def face_geometry(eclass: ElementClass, verts: np.ndarray, faces: np.ndarray):
    """Outward normal scaled by the face area, and the face midpoint, per element."""
    n, _, d = verts.shape
    corners = np.array([FACE_VERTICES[eclass][f] for f in range(eclass.num_faces)], dtype=object)
    width = len(FACE_VERTICES[eclass][0])
    idx = np.array([list(corners[f]) for f in faces], np.int64).reshape(n, width)
    rows = np.arange(n)[:, None]
    pts = verts[rows, idx]
    mid = _mean_points(pts)
    p0 = pts[:, 0]
    if d == 2:
        t = pts[:, 1] - p0
        na = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        a, b = pts[:, 1] - p0, pts[:, 2] - p0
        na = np.stack([a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
                       a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
                       a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]], axis=1)
        if width == 3:
            na = na / 2
    away = mid - _mean_points(verts)
    dot = na[:, 0] * away[:, 0] + na[:, 1] * away[:, 1]
    if d == 3:
        dot = dot + na[:, 2] * away[:, 2]
    na = np.where((dot < 0)[:, None], -na, na)
    return na, mid


def leaf_geometry(forest: F.Forest, p: int) -> tuple[np.ndarray, np.ndarray]:
    """(volumes, centroids) of the local leaves of rank p."""
    n = forest.local_count(p)
    vol = np.zeros(n)
    cen = np.zeros((n, forest.dim))
    cm = forest.cmeshes[p]
    for t, a, b, elems in forest.iter_trees(p):
        verts = F.element_vertices(forest, cm, t, elems)
        vol[a:b] = element_volume(forest.tree_class(t), verts)
        cen[a:b] = _mean_points(verts)
    return vol, cen


# ---------------------------------------------------------------------------
# Flux plan


@dataclass
class FluxPlan:
    """Faces seen by one rank, each stored once from its canonical side.

    Conforming faces are owned by the side with the smaller (tree, linear id,
    face); hanging faces by the finer side.  ``canon`` and ``other`` index the
    rank's value array (local leaves, then ghosts).  Each incidence adds
    ``sign * psi[face]`` to the flux sum of a local leaf.
    """

    num_local: int
    canon: np.ndarray
    other: np.ndarray
    normal_area: np.ndarray
    midpoint: np.ndarray
    inc_elem: np.ndarray
    inc_face: np.ndarray
    inc_sign: np.ndarray
    volume: np.ndarray
    centroid: np.ndarray


class _Lookup:
    """Local and ghost leaves of one rank, sorted by (tree, linear id)."""

    def __init__(self, forest: F.Forest, p: int):
        n = forest.local_count(p)
        gl = forest.ghosts[p] if forest.ghosts is not None else F.GhostLayer.empty(forest.dim)
        tree = np.concatenate([forest.leafsets[p].tree, gl.leaves.tree])
        lid = np.concatenate([forest.lids[p], gl.lids])
        self.level = np.concatenate([forest.leafsets[p].level, gl.leaves.level])
        order = np.lexsort((lid, tree))
        self.tree, self.lid, self.vindex = tree[order], lid[order], np.arange(len(tree))[order]
        self.level = self.level[order]
        self.max_level = forest.max_level
        self.n = n

    def find(self, tree: int, dim: int, lids: np.ndarray, levels: np.ndarray):
        """(value index, leaf level) of the leaf containing each element, or (-1, -1)."""
        a, b = np.searchsorted(self.tree, [tree, tree + 1])
        pos = np.searchsorted(self.lid[a:b], lids, side="right") - 1 + a
        ok = pos >= a
        pos = np.where(ok, pos, a)
        if b == a:
            return np.full(len(lids), -1), np.full(len(lids), -1)
        lev = self.level[pos]
        span = np.left_shift(np.int64(1), dim * (self.max_level - lev))
        ok &= (lev <= levels) & (lids - self.lid[pos] < span)
        return np.where(ok, self.vindex[pos], -1), np.where(ok, lev, -1)


def build_plan(forest: F.Forest, p: int) -> FluxPlan:
    look = _Lookup(forest, p)
    cm = forest.cmeshes[p]
    d = forest.dim
    vol, cen = leaf_geometry(forest, p)
    # incidence records: element, face, sub, canonical (tree, lid, level, face), element data
    rec = {k: [] for k in ("elem", "face", "sub", "sign", "canon", "other",
                           "ctree", "clid", "clevel", "cface", "ccoords", "cbtype")}

    def emit(elem, face, sub, sign, canon, other, ctree, elems_c, faces_c):
        sch = forest.scheme(ctree)
        k = len(elem)
        rec["elem"].append(elem)
        rec["face"].append(np.full(k, face))
        rec["sub"].append(np.full(k, sub))
        rec["sign"].append(np.full(k, sign, float) if np.isscalar(sign) else sign)
        rec["canon"].append(canon)
        rec["other"].append(other)
        rec["ctree"].append(np.full(k, ctree))
        rec["clid"].append(sch.linear_id(elems_c))
        rec["clevel"].append(elems_c.level)
        rec["cface"].append(faces_c)
        rec["ccoords"].append(elems_c.coords)
        rec["cbtype"].append(elems_c.btype)

    for t, a, b, elems in forest.iter_trees(p):
        sch = forest.scheme(t)
        lidE = forest.lids[p][a:b]
        gidx = np.arange(a, b)
        for f in range(sch.num_faces):
            finer = []
            for g in F.face_neighbors(forest, cm, t, elems, f):
                nsch = forest.scheme(g.tree)
                lidN = nsch.linear_id(g.elements)
                j, lev = look.find(g.tree, d, lidN, g.elements.level)
                same = lev == g.elements.level
                coarse = lev == g.elements.level - 1
                if np.any((lev >= 0) & ~same & ~coarse):
                    raise ValueError("forest is not 2:1 balanced")
                finer.append(g.index[lev < 0])
                # conforming
                s = np.flatnonzero(same)
                if len(s):
                    ie = g.index[s]
                    e_first = ((t < g.tree) | ((t == g.tree) & ((lidE[ie] < lidN[s])
                               | ((lidE[ie] == lidN[s]) & (f < g.dual[s])))))
                    for mask, mine in ((e_first, True), (~e_first, False)):
                        if not mask.any():
                            continue
                        ii, ss = ie[mask], s[mask]
                        if mine:
                            emit(gidx[ii], f, 0, 1.0, gidx[ii], j[ss], t, elems[ii],
                                 np.full(len(ii), f))
                        else:
                            emit(gidx[ii], f, 0, -1.0, j[ss], gidx[ii], g.tree,
                                 g.elements[ss], g.dual[ss])
                # neighbor is coarser: this side is the finer one
                c = np.flatnonzero(coarse)
                if len(c):
                    ie = g.index[c]
                    emit(gidx[ie], f, 0, 1.0, gidx[ie], j[c], t, elems[ie], np.full(len(ie), f))
            finer = np.concatenate(finer) if finer else np.zeros(0, np.int64)
            if not len(finer):
                continue
            per_child = F.half_neighbors_batch(forest, cm, t, elems[finer], f)
            for sub, groups in enumerate(per_child):
                for g in groups:
                    nsch = forest.scheme(g.tree)
                    lidH = nsch.linear_id(g.elements)
                    j, lev = look.find(g.tree, d, lidH, g.elements.level)
                    if np.any(lev != g.elements.level):
                        raise ValueError("missing ghost or unbalanced forest at a hanging face")
                    ie = finer[g.index]
                    emit(gidx[ie], f, sub, -1.0, j, gidx[ie], g.tree, g.elements, g.dual)

    if not rec["elem"]:
        z = np.zeros(0, np.int64)
        return FluxPlan(look.n, z, z, np.zeros((0, d)), np.zeros((0, d)), z, z, np.zeros(0),
                        vol, cen)
    cat = {k: np.concatenate(v) for k, v in rec.items()}
    order = np.lexsort((cat["sub"], cat["face"], cat["elem"]))
    cat = {k: v[order] for k, v in cat.items()}
    key = np.stack([cat["ctree"], cat["clid"], cat["clevel"], cat["cface"]], axis=1)
    ukey, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    na = np.zeros((len(ukey), d))
    mid = np.zeros((len(ukey), d))
    ctree = cat["ctree"][first]
    for t in np.unique(ctree):
        sel = np.flatnonzero(ctree == t)
        rows = first[sel]
        cls = forest.tree_class(int(t))
        el = Elements(cls, cat["ccoords"][rows], cat["clevel"][rows], cat["cbtype"][rows])
        verts = F.element_vertices(forest, cm, int(t), el)
        na[sel], mid[sel] = face_geometry(cls, verts, cat["cface"][rows])
    return FluxPlan(look.n, cat["canon"][first], cat["other"][first], na, mid,
                    cat["elem"], inverse, cat["sign"], vol, cen)


# ---------------------------------------------------------------------------
# Numerical flux and time step


def flux(plan: FluxPlan, values: np.ndarray, u: FlowField, t: float) -> np.ndarray:
    """Upwind flux of every plan face, seen from its canonical side."""
    uh = u(plan.midpoint, t)
    a = plan.normal_area[:, 0] * uh[:, 0]
    for k in range(1, plan.normal_area.shape[1]):
        a = a + plan.normal_area[:, k] * uh[:, k]
    up = np.where(a >= 0, values[plan.canon], values[plan.other])
    return up * a


def flux_sums(plan: FluxPlan, values: np.ndarray, u: FlowField, t: float) -> np.ndarray:
    """Sum over faces of the outgoing flux of each local leaf."""
    psi = flux(plan, values, u, t)
    return np.bincount(plan.inc_elem, weights=plan.inc_sign * psi[plan.inc_face],
                       minlength=plan.num_local)


def step(plan: FluxPlan, values: np.ndarray, u: FlowField, dt: float, t: float) -> np.ndarray:
    """One explicit Euler step; ``values`` holds local then ghost entries."""
    total = flux_sums(plan, values, u, t)
    return values[:plan.num_local] - dt / plan.volume * total


def choose_dt(forest: F.Forest, u: FlowField, cfl: float, end_time: float = 1.0) -> float:
    """Largest dt with max_E |u(m_E, 0)| dt / vol(E)^(1/d) equal to ``cfl``."""
    rates = []
    for p in range(forest.num_ranks):
        vol, cen = leaf_geometry(forest, p)
        speed = np.sqrt((u(cen, 0.0) ** 2).sum(axis=1)) if len(vol) else np.zeros(0)
        rates.append(float((speed / vol ** (1.0 / forest.dim)).max()) if len(vol) else 0.0)
    rate = max(allgather(forest.world, rates, "cfl_rate")[0])
    if rate == 0.0:
        return end_time
    return cfl / rate


def adapt_criterion(level, phi, volume, band: float, min_level: int, max_level: int,
                    vol_threshold: float = 0.0, dim: int = 2) -> np.ndarray:
    """+1 refine, -1 coarsen, 0 keep, per element."""
    level = np.asarray(level)
    phi = np.asarray(phi, float)
    volume = np.asarray(volume, float)
    h = volume ** (1.0 / dim)
    near = np.abs(phi) < band * h
    refine = near & (level < max_level) & (volume > vol_threshold)
    coarsen = ~near & (level > min_level)
    return np.where(refine, 1, np.where(coarsen, -1, 0))


# ---------------------------------------------------------------------------
# Driver


@dataclass
class RunResult:
    stats: list[StepStats]
    e_vol: float
    dt: float
    steps: int
    mean_elements: float
    forest: F.Forest
    data: list[np.ndarray]
    timings: dict[str, float]


def _global_concat(world: RankWorld, parts: list[np.ndarray], tag: str) -> np.ndarray:
    return np.concatenate(allgather(world, parts, tag)[0])


class _Timer:
    def __init__(self):
        self.total: dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.total[name] = timer.total.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def _centroid_values(forest: F.Forest, phi0) -> list[np.ndarray]:
    return [phi0(leaf_geometry(forest, p)[1]) for p in range(forest.num_ranks)]


def run(config: SolverConfig, cmesh: CoarseMesh, u: FlowField, phi0: LevelSetInit,
        vtk_dir: str | Path | None = None, max_steps: int | None = None) -> RunResult:
    """Adapt to the initial band, then advect to the end time with periodic re-adaptation."""
    timer = _Timer()
    P = config.ranks
    world = RankWorld(P, record_trace=False)
    lmin, lmax = config.level, config.level + config.rlevels
    d = cmesh.dim

    with timer("new"):
        forest = F.new_uniform(cmesh, lmin, P, world=world)
    data = _centroid_values(forest, phi0)

    def criterion(forest, data):
        flags = []
        for p in range(P):
            vol, _ = leaf_geometry(forest, p)
            flags.append(adapt_criterion(forest.leafsets[p].level, data[p], vol, config.band,
                                         lmin, lmax, config.min_volume, d))
        return flags

    for _ in range(config.rlevels):
        with timer("adapt"):
            new = F.adapt_by_flags(forest, criterion(forest, data))
        if new.all_leaves() == forest.all_leaves():
            break
        forest = new
        data = _centroid_values(forest, phi0)
    if config.balance and config.rlevels:
        with timer("balance"):
            forest = F.balance_ripple(forest, ghost_version=config.ghost_version)
    with timer("partition"):
        forest = F.partition(forest)
    data = _centroid_values(forest, phi0)
    with timer("ghost"):
        forest = F.ghost(forest, config.ghost_version)
    plans = [build_plan(forest, p) for p in range(P)]

    dt = choose_dt(forest, u, config.cfl, config.end_time)
    steps = max(1, math.ceil(config.end_time / dt - 1e-9))
    dt = config.end_time / steps
    if max_steps is not None:
        steps = min(steps, max_steps)

    def measure(step_no, t):
        vols = _global_concat(world, [pl.volume for pl in plans], "report_vol")
        vals = _global_concat(world, data, "report_phi")
        inside = float(vols[vals < 0].sum())
        integral = float((vols * vals).sum())
        return inside, integral, StepStats(step_no, t, forest.num_leaves,
                                           sum(forest.ghost_count(p) for p in range(P)),
                                           0.0, integral, dict(timer.total))

    vol0, _, first = measure(0, 0.0)
    bound = max(float(np.abs(v).max()) for v in data if len(v)) if forest.num_leaves else 1.0
    stats = [first]
    element_steps = 0

    def e_vol(inside):
        return 1.0 - inside / vol0 if vol0 > 0 else 0.0

    vtk = Path(vtk_dir) if vtk_dir is not None else None
    if vtk is not None:
        vtk.mkdir(parents=True, exist_ok=True)
        F.write_vtk(forest, vtk / "step_000000.vtk", data, "phi")

    adaptive = config.rlevels > 0
    for k in range(1, steps + 1):
        t = (k - 1) * dt
        element_steps += forest.num_leaves
        with timer("ghost_exchange"):
            full = F.ghost_exchange(forest, data) if P > 1 else data
        with timer("solver"):
            data = [step(plans[p], full[p], u, dt, t) for p in range(P)]
        peak = max(float(np.abs(v).max()) for v in data if len(v))
        if not np.isfinite(peak) or peak > 10 * bound:
            raise InstabilityError(f"step {k}: |phi| reached {peak:.3g}, more than 10x the "
                                   f"initial bound {bound:.3g}; lower the CFL number")
        if adaptive and k % config.period == 0 and k < steps:
            with timer("adapt"):
                new = F.adapt_by_flags(forest, criterion(forest, data))
            with timer("interpolate"):
                data = F.interpolate_data(forest, new, data)
            forest = new
            if config.balance:
                with timer("balance"):
                    forest, data = F.balance_ripple_with_data(
                        forest, data, ghost_version=config.ghost_version)
            with timer("partition"):
                new = F.partition(forest)
            with timer("partition_data"):
                data = F.partition_data(forest, new, data)
            forest = new
            with timer("ghost"):
                forest = F.ghost(forest, config.ghost_version)
            plans = [build_plan(forest, p) for p in range(P)]
            if vtk is not None:
                F.write_vtk(forest, vtk / f"step_{k:06d}.vtk", data, "phi")
        inside, integral, rec = measure(k, k * dt)
        rec.e_vol = e_vol(inside)
        stats.append(rec)

    if vtk is not None:
        F.write_vtk(forest, vtk / f"step_{steps:06d}.vtk", data, "phi")
    return RunResult(stats, stats[-1].e_vol, dt, steps, element_steps / max(steps, 1),
                     forest, data, dict(timer.total))
