"""
Mining item-item graphs from features
=====================================

Each modality gets its own sparse item graph: cosine similarity between
feature rows, the k strongest neighbors per item, then symmetric degree
normalization. During training a second graph is built from learned
feature projections and mixed with the first one.
"""

import numpy as np

from micro.graph import blend_graphs, build_initial_graph, build_learned_graph, transform_features

rng = np.random.default_rng(0)

# six items, two loose clusters in a 4-d feature space
centers = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
features = np.repeat(centers, 3, axis=0) + 0.2 * rng.standard_normal((6, 4))

initial = build_initial_graph(features, k=3, modality="visual")
print("initial graph (rows sum to roughly one, neighbors stay in-cluster):")
print(np.round(initial.adjacency.toarray(), 3))

###############################################################################
# A random linear projection stands in for the trained transform. Its graph
# is mixed in with weight 1 - lam.

w, b = rng.standard_normal((4, 4)), np.zeros(4)
learned = build_learned_graph(transform_features(features, w, b), k=3)
mixed = blend_graphs(initial, learned, lam=0.7)
print("edges per row  initial:", initial.adjacency.row_nnz(), " mixed:", mixed.adjacency.row_nnz())
