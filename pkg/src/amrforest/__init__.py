"""Tree-based adaptive mesh refinement with Morton and tetrahedral Morton curves."""
