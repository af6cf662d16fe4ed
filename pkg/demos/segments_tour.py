"""How often is a run of consecutive leaves along the curve face-connected?

Enumerates every segment of a uniform refinement and prints the distribution
of connected-component counts, then shows the worst segment found.
"""

from amrforest import segments as S

for eclass in ("quad", "tri", "hex", "tet"):
    level = 3
    st = S.enumerate_all(eclass, level)
    print(f"{eclass} level {level}: {st.total} segments over {st.num_elements} elements")
    for row in st.rows():
        print(f"  {row['components']} component(s): {100 * row['fraction']:5.1f}%"
              f"  mean length {row['avg_length']:.1f}")
    lo, hi = st.witness
    print(f"  worst segment {lo}..{hi} splits into {st.max_components} pieces"
          f" (bound {S.component_bound(eclass, level)})")
    print()

# a single segment can be checked directly
print("tri level 2, elements 3..5:", S.components_of_segment("tri", 2, 3, 5), "components")
