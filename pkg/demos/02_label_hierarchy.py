"""
Class taxonomies at three granularities
=======================================

A hierarchy lists levels from coarse to fine. Each coarser level says
which of its classes every finer class merges into, so one fine label
map supervises all levels.
"""

import numpy as np

from parsestack.hierarchy import bundled_hierarchy, expand_sample, hierarchy_from_text
from parsestack.metrics import consistency

h = bundled_hierarchy("helen3")
for lv in h.levels:
    print(f"{lv.name:>7}: {lv.num_classes:2d} classes  {', '.join(lv.class_names)}")

# fine -> coarse lookup, composed across the middle level
print("fine to coarse:", h.composed_map(0).tolist())

rng = np.random.default_rng(1)
fine = rng.integers(0, h.num_classes(h.finest), (4, 6))
labels = expand_sample(fine, h)
print("coarse map\n", labels[0])

# maps produced by merging always agree across levels
print("consistency", consistency(labels, h))

# the plain-text form round-trips and identifies the taxonomy by digest
text = h.to_text()
assert hierarchy_from_text(text) == h
print(text.splitlines()[:4], "...")
print("digest", h.hexdigest()[:16])
