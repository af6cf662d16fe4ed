"""The adaptive forest life cycle on a hybrid quad/triangle mesh.

new -> adapt -> balance -> partition -> ghost, printing per-rank leaf and
ghost counts after each stage.
"""

import numpy as np

from amrforest import cmesh as C
from amrforest import forest as F

mesh = C.builtin_cmesh("periodic_square_hybrid")
forest = F.new_uniform(mesh, 2, num_ranks=3)


def show(label, f):
    counts = [f.local_count(p) for p in range(f.num_ranks)]
    print(f"{label:>10}: {sum(counts)} leaves, per rank {counts}")


show("new", forest)

# refine the leaves of tree 0 twice, once per round
for _ in range(2):
    flags = [np.where(ls.tree == 0, 1, 0) for ls in forest.leafsets]
    forest = F.adapt_by_flags(forest, flags)
show("adapt", forest)

forest = F.balance_ripple(forest)
show("balance", forest)
print("           balanced:", F.is_balanced(forest))

forest = F.partition(forest)
show("partition", forest)

forest = F.ghost(forest)
for row in F.stats_rows(forest):
    print(f"  rank {row['rank']}: {row['leaves']} leaves, {row['ghosts']} ghosts")
