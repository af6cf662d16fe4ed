"""Moving trees of a distributed coarse mesh between ranks.

Builds a five-tree mesh, splits it over three ranks, and repartitions it to a
new layout in which ranks share boundary trees.  Each rank only needs the old
and new offset arrays to decide whom to send to and receive from.
"""

from amrforest import cmesh as C
from amrforest.vranks import RankWorld

mesh = C.builtin_cmesh("five_trees")
old = C.offsets_from_sets([[0, 1], [1, 2], [2, 3, 4]], mesh.num_trees)
new = C.offsets_from_sets([[0, 1, 2], [2, 3], [3, 4]], mesh.num_trees)
print("old offsets", [int(x) for x in old])
print("new offsets", [int(x) for x in new])

for p in range(3):
    pat = C.send_recv_sets(p, old, new)
    print(f"rank {p} sends to {list(pat.send)} and receives from {list(pat.recv)}")

world = RankWorld(3)
parts = C.split_cmesh(mesh, old)
moved = C.partition_cmesh(parts, new, world=world)
for p, local in enumerate(moved):
    print(f"rank {p} now holds trees {[t.gid for t in local.trees]}"
          f" with ghosts {sorted(g.gid for g in local.ghosts)}")
print(len(world.trace), "messages exchanged")

# the result matches a fresh split of the replicated mesh
fresh = C.split_cmesh(mesh, new)
print("same as a fresh split:",
      all([t.gid for t in a.trees] == [t.gid for t in b.trees] for a, b in zip(moved, fresh)))
