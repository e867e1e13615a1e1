"""
Knowledge-graph variants
========================

Counts nodes and edges of the three graph variants on the bundled
mini-ontology and shows how the normalized adjacency behaves.
"""

import json
from importlib import resources

import numpy as np

from gcngrasp.dataset import Ontology
from gcngrasp.knowledge_graph import VARIANTS, build_graph, normalize_adjacency

text = (resources.files("gcngrasp") / "data" / "mini_ontology.json").read_text()
onto = Ontology.from_json(json.loads(text))

for variant in VARIANTS:
    g = build_graph(onto, variant)
    print(f"{variant:<13} {len(g.nodes):>3} nodes {len(g.edges):>3} edges")

# %%
# With self loops added, a d-regular graph normalizes to rows that sum to one.
ring = np.roll(np.eye(6), 1, axis=1)
ring = ring + ring.T
print(normalize_adjacency(ring).sum(axis=1))
