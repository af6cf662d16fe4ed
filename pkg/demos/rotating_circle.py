"""Advect a circular level set once around the unit square.

Compares a uniform run against an adaptive run that refines a band around
the zero level set, and reports the relative volume error at the end.
"""

from amrforest import advection as A
from amrforest.cmesh import builtin_cmesh

mesh = builtin_cmesh("periodic_square_quad")
flow = A.FlowField("rotation2d")
phi0 = A.LevelSetInit.for_dim(2)

for label, cfg in [("uniform l4", A.SolverConfig(level=4, cfl=0.5)),
                   ("adaptive l3 +2", A.SolverConfig(level=3, rlevels=2, cfl=0.5))]:
    res = A.run(cfg, mesh, flow, phi0)
    print(f"{label:>15}: {res.steps} steps, dt {res.dt:.4g},"
          f" mean {res.mean_elements:.0f} elements, E_vol {100 * res.e_vol:.1f}%")
