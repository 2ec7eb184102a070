import numpy as np

from gcmtal.core import ActionUnit, Interval
from gcmtal.graphbuild import GraphParams, build_graph, compute_adjacency, dump_graph, tiou

# A handful of proposals in one video.  The first three overlap heavily,
# the fourth sits right after them, the last two are far away.
rng = np.random.default_rng(0)
spans = [(0.0, 10.0), (0.5, 10.5), (1.0, 9.5), (12.0, 20.0), (40.0, 48.0), (60.0, 62.0)]
feats = rng.normal(size=(len(spans), 8))
feats[5] = feats[0] + 0.1 * rng.normal(size=8)  # looks like unit 0, lives elsewhere
units = [ActionUnit(i, "demo", Interval(s, e), f) for i, ((s, e), f) in enumerate(zip(spans, feats))]

print(tiou(units[0].interval, units[1].interval))  # well above 0.7
print(tiou(units[0].interval, units[3].interval))  # disjoint

# semantic_l=2 keeps the kNN lists short enough to read
g = build_graph(units, GraphParams(semantic_l=2))
print(g.node_count, g.edge_count)
for kind in ("contextual", "surrounding", "semantic"):
    print(kind, sorted(g.edges_of_kind(kind)))

# Edge weights are cosine similarities of the endpoint features
A = compute_adjacency(g, feats)
print(np.round(A.to_dense(), 2))

# Same thing as text, one edge per line
print(dump_graph(g, A))

# Without surrounding edges some of those pairs come back as semantic
# ones, since a disjoint kNN neighbor qualifies either way
g2 = build_graph(units, GraphParams(semantic_l=2, edge_kinds=frozenset({"contextual", "semantic"})))
print(g.edge_count - g2.edge_count, len(g.edges_of_kind("surrounding")))
print(sorted(g2.edges_of_kind("semantic")))
