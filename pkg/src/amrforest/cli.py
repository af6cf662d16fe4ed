"""Command line entry point: ``amrforest <subcommand>``."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import advection as A
from . import cmesh as C
from . import forest as F
from . import segments as S
from .vranks import RankWorld

# published connected-segment percentages at print precision
REFERENCE_CONNECTED = {("quad", 5): 71.6, ("hex", 5): 60.0, ("tri", 5): 63.9, ("tet", 5): 61.0,
                       ("tri", 8): 63.7}
REFERENCE_TRI8 = {1: 63.7, 2: 29.7, 3: 4.4}

FLOW_FOR_DIM = {2: "rotation2d", 3: "cube3d"}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    subcommand: str
    flags: dict
    seed: int | None = None
    version: str = field(default_factory=_version)
    outputs: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"subcommand = {self.subcommand}", f"version = {self.version}",
                 f"seed = {self.seed if self.seed is not None else 'none'}"]
        lines += [f"flag.{k} = {v}" for k, v in sorted(self.flags.items())]
        lines += [f"output = {o}" for o in self.outputs]
        return "\n".join(lines) + "\n"

    def write_next_to(self, path: Path) -> Path:
        target = path.with_name(path.name + ".manifest")
        target.write_text(self.to_text())
        return target


def _write_csv(path: str | None, text: str, manifest: RunManifest) -> None:
    if path is None:
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    manifest.outputs.append(str(out))
    manifest.write_next_to(out)
    click.echo(f"wrote {out}")


def _load_mesh(name: str) -> C.CoarseMesh:
    if Path(name).is_file():
        return C.read_text(Path(name).read_text())
    try:
        return C.builtin_cmesh(name)
    except ValueError:
        raise click.BadParameter(f"unknown mesh {name!r}; builtins: {', '.join(C.BUILTIN_MESHES)}",
                                 param_hint="--mesh") from None


@click.group()
@click.version_option(_version(), prog_name="amrforest")
def main():
    """Adaptive forest-of-trees meshes with Morton and tetrahedral Morton curves."""


# ---------------------------------------------------------------------------
# segments


@main.command()
@click.option("--class", "eclass", required=True,
              type=click.Choice(["line", "quad", "tri", "hex", "tet"]))
@click.option("--level", "-l", required=True, type=click.IntRange(0, 21))
@click.option("--force", is_flag=True, help="Ignore the extension budget (T8X_BUDGET).")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV file for the histogram.")
def segments(eclass, level, force, out):
    """Component histogram of every SFC segment of a uniform tree."""
    try:
        stats = S.enumerate_all(eclass, level, force=force)
    except S.BudgetExceeded as exc:
        click.echo(f"refused: {exc}", err=True)
        sys.exit(2)
    manifest = RunManifest("segments", dict(eclass=eclass, level=level, force=force))
    text = stats.to_csv()
    click.echo(text, nl=False)
    _write_csv(out, text, manifest)
    failed = False
    try:
        observed, bound, witness = S.bound_check(eclass, level, stats)
        click.echo(f"max components {observed} <= bound {bound} (segment {witness[0]}..{witness[1]})")
    except AssertionError as exc:
        click.echo(f"FAIL {exc}", err=True)
        failed = True
    ref = REFERENCE_CONNECTED.get((eclass, level))
    if ref is not None:
        got = round(100 * stats.fraction_connected, 1)
        ok = got == ref
        failed |= not ok
        click.echo(f"{'ok' if ok else 'FAIL'} connected {got}% (reference {ref}%)")
    if (eclass, level) == ("tri", 8):
        for c, ref in REFERENCE_TRI8.items():
            got = round(100 * stats.fraction(c), 1)
            failed |= got != ref
            click.echo(f"{'ok' if got == ref else 'FAIL'} {c} components {got}% (reference {ref}%)")
    sys.exit(1 if failed else 0)


# ---------------------------------------------------------------------------
# advect


@main.command()
@click.option("--mesh", "-c", default="periodic_square_quad", show_default=True,
              help="Builtin mesh name or text mesh file.")
@click.option("--level", "-l", default=4, show_default=True, type=click.IntRange(0, 21))
@click.option("--rlevels", "-r", default=0, show_default=True, type=click.IntRange(0, 21))
@click.option("--cfl", "-C", default=0.5, show_default=True, type=float)
@click.option("--band", "-b", default=4.0, show_default=True, type=float)
@click.option("--end-time", "-T", default=1.0, show_default=True, type=float)
@click.option("--ranks", "-n", default=1, show_default=True, type=click.IntRange(1))
@click.option("--balance/--no-balance", default=True, show_default=True)
@click.option("--adapt-period", type=click.IntRange(1), help="Steps between re-adaptations [1/C].")
@click.option("--min-volume", default=0.0, show_default=True, type=float)
@click.option("--flow", type=click.Choice(["rotation2d", "cube3d", "zero"]),
              help="Velocity field [rotation2d in 2D, cube3d in 3D].")
@click.option("--ghost-version", default="v2", show_default=True,
              type=click.Choice(["v1", "v2", "v3"]))
@click.option("--vtk", type=click.Path(file_okay=False), help="Directory for VTK dumps.")
@click.option("--out", type=click.Path(dir_okay=False), help="Per-step CSV.")
@click.option("--timings", is_flag=True, help="Include ghosts and timings in the CSV.")
def advect(mesh, level, rlevels, cfl, band, end_time, ranks, balance, adapt_period, min_volume,
           flow, ghost_version, vtk, out, timings):
    """Advect a circle (2D) or sphere (3D) level set and report the volume loss."""
    cm = _load_mesh(mesh)
    if cm.dim not in (2, 3):
        raise click.BadParameter("advection needs a 2D or 3D mesh", param_hint="--mesh")
    config = A.SolverConfig(level=level, rlevels=rlevels, cfl=cfl, band=band, end_time=end_time,
                            ranks=ranks, balance=balance, min_volume=min_volume,
                            adapt_period=adapt_period, ghost_version=ghost_version)
    u = A.FlowField(flow or FLOW_FOR_DIM[cm.dim])
    try:
        res = A.run(config, cm, u, A.LevelSetInit.for_dim(cm.dim), vtk_dir=vtk)
    except A.InstabilityError as exc:
        click.echo(f"FAIL {exc}", err=True)
        sys.exit(1)
    manifest = RunManifest("advect", dict(mesh=mesh, level=level, rlevels=rlevels, cfl=cfl,
                                          band=band, end_time=end_time, ranks=ranks,
                                          balance=balance, adapt_period=config.period,
                                          min_volume=min_volume, flow=u.kind,
                                          ghost_version=ghost_version))
    if vtk is not None:
        manifest.outputs.append(str(vtk))
    _write_csv(out, A.stats_csv(res.stats, rank_dependent=timings), manifest)
    click.echo(f"steps {res.steps}  dt {res.dt:.6g}  mean elements {res.mean_elements:.1f}")
    click.echo(f"E_vol {100 * res.e_vol:.2f}%")
    click.echo("phase            seconds")
    for name, sec in sorted(res.timings.items()):
        click.echo(f"{name:<16} {sec:.3f}")
    first = res.stats[0].integral
    drift = max(abs(s.integral - first) for s in res.stats) / max(abs(first), 1e-300)
    ok = drift < 1e-8
    click.echo(f"{'ok' if ok else 'FAIL'} integral drift {drift:.2e}")
    sys.exit(0 if ok else 1)


# ---------------------------------------------------------------------------
# partition-demo

EXAMPLE_O = [0, -2, 3, 5]
EXAMPLE_O_NEW = [0, -3, -4, 5]


def _trace_lines(world: RankWorld) -> list[str]:
    return [f"  phase {r.phase}: {r.sender} -> {r.receiver} [{r.tag}] {r.nbytes} bytes"
            for r in world.trace]


def _replay(mesh, O, O_new):
    world = RankWorld(len(O) - 1)
    plan: dict = {}
    after = C.partition_cmesh(C.split_cmesh(mesh, O), O_new, world, plan=plan)
    reference = C.split_cmesh(mesh, O_new)
    same = all([t.gid for t in a.trees] == [t.gid for t in b.trees]
               and sorted(g.gid for g in a.ghosts) == sorted(g.gid for g in b.ghosts)
               for a, b in zip(after, reference))
    return world, plan, same


def _example5trees(_args) -> bool:
    P = 3
    ok = True
    click.echo(f"old offsets {EXAMPLE_O}  new offsets {EXAMPLE_O_NEW}")
    click.echo("send table (row sends to column):")
    for p in range(P):
        cells = []
        for q in range(P):
            lo, hi = C.send_range(p, q, EXAMPLE_O, EXAMPLE_O_NEW)
            cells.append("{" + ",".join(map(str, range(lo, hi + 1))) + "}")
        click.echo(f"  {p}: " + " ".join(f"{c:>8}" for c in cells))
    for p in range(P):
        pat = C.send_recv_sets(p, EXAMPLE_O, EXAMPLE_O_NEW)
        click.echo(f"  S_{p} = {set(pat.send) or '{}'}  R_{p} = {set(pat.recv) or '{}'}")
    pat = C.send_recv_sets(1, EXAMPLE_O, EXAMPLE_O_NEW)
    ok &= pat.send == (0, 1) and pat.recv == (1, 2)
    world, _, same = _replay(C.builtin_cmesh("five_trees"), EXAMPLE_O, EXAMPLE_O_NEW)
    click.echo("message trace:")
    click.echo("\n".join(_trace_lines(world)))
    return ok and same


def _identity(args) -> bool:
    mesh = C.builtin_cmesh("brick", nx=args["nx"], ny=args["ny"], nz=args["nz"])
    O = C.uniform_offsets(mesh.num_trees, args["ranks"])
    world, plan, same = _replay(mesh, O, O)
    remote = [r for r in world.trace if r.sender != r.receiver]
    click.echo(f"offsets {[int(x) for x in O]} -> unchanged; {len(remote)} messages between ranks")
    return same and not remote


def _brick(args) -> bool:
    P = args["ranks"]
    mesh = C.disjoint_bricks(args["nx"], args["ny"], args["nz"], P)
    O = C.uniform_offsets(mesh.num_trees, P)
    O_new = C.shift_fraction_offsets(O, args["fraction"])
    world, plan, same = _replay(mesh, O, O_new)
    click.echo(f"offsets {[int(x) for x in O]} -> {[int(x) for x in O_new]}")
    ok = same
    for (s, q), (trees, ghosts) in sorted(plan.items()):
        click.echo(f"  {s} -> {q}: trees {[int(t) for t in trees]} ghosts {[int(g) for g in ghosts]}")
    per_rank = mesh.num_trees // P
    want = int(args["fraction"] * per_rank)
    for p in range(P - 1):
        ok &= len(plan.get((p, p + 1), ((), ()))[0]) == want
    click.echo("message trace:")
    click.echo("\n".join(_trace_lines(world)))
    return ok


SCENARIOS = {"example5trees": _example5trees, "identity": _identity, "brick": _brick}


@main.command("partition-demo")
@click.option("--scenario", required=True, type=click.Choice(sorted(SCENARIOS)))
@click.option("--nx", default=2, show_default=True, type=click.IntRange(1))
@click.option("--ny", default=2, show_default=True, type=click.IntRange(1))
@click.option("--nz", default=2, show_default=True, type=click.IntRange(1))
@click.option("--ranks", "-n", default=4, show_default=True, type=click.IntRange(1))
@click.option("--fraction", default=0.43, show_default=True, type=click.FloatRange(0, 1))
def partition_demo(scenario, **args):
    """Replay a coarse-mesh repartitioning scenario on virtual ranks."""
    ok = SCENARIOS[scenario](args)
    click.echo("ok" if ok else "FAIL expectations not met")
    sys.exit(0 if ok else 1)


# ---------------------------------------------------------------------------
# mesh


@main.group()
def mesh():
    """Inspect, create and convert text coarse meshes."""


def _read_or_exit(path: str) -> C.CoarseMesh:
    try:
        return C.read_text(Path(path).read_text())
    except C.MeshFormatError as exc:
        click.echo(f"{path}: {exc}", err=True)
        sys.exit(1)


@mesh.command("info")
@click.argument("source")
def mesh_info(source):
    """Tree, class and connection counts of a mesh file or builtin name."""
    cm = _read_or_exit(source) if Path(source).is_file() else _load_mesh(source)
    info = C.mesh_info(cm)
    click.echo(f"dim {info['dim']}  trees {info['trees']}")
    for name, n in sorted(info["classes"].items()):
        click.echo(f"  {name}: {n}")
    click.echo(f"connected faces {info['connected_faces']}  boundary faces {info['boundary_faces']}")
    try:
        C.check_symmetric(cm)
    except ValueError as exc:
        click.echo(f"FAIL {exc}", err=True)
        sys.exit(1)
    click.echo("connectivity symmetric")


@mesh.command("new")
@click.argument("kind", type=click.Choice(C.BUILTIN_MESHES))
@click.option("--nx", default=1, type=click.IntRange(1))
@click.option("--ny", default=1, type=click.IntRange(1))
@click.option("--nz", default=1, type=click.IntRange(1))
@click.option("--out", type=click.Path(dir_okay=False), help="Output file [stdout].")
def mesh_new(kind, nx, ny, nz, out):
    """Write a builtin mesh in the text format."""
    params = dict(nx=nx, ny=ny, nz=nz) if kind in ("brick", "periodic_brick", "line") else {}
    text = C.write_text(C.builtin_cmesh(kind, **params))
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)
        click.echo(f"wrote {out}")


@mesh.command("convert")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("target", type=click.Path(dir_okay=False))
@click.option("--level", "-l", default=0, show_default=True, type=click.IntRange(0, 10))
def mesh_convert(source, target, level):
    """Text mesh to text (normalized) or, for a .vtk target, to a uniform-level VTK file."""
    cm = _read_or_exit(source)
    if target.endswith(".vtk"):
        f = F.new_uniform(cm, level, 1)
        F.write_vtk(f, target, [np.arange(f.num_leaves, dtype=float)], "leaf")
    else:
        Path(target).write_text(C.write_text(cm))
    click.echo(f"wrote {target}")


if __name__ == "__main__":
    main()
