import numpy as np

from gcmtal.gcm import enumerated_propagation, full_propagation, sample_propagation, sampled_aggregate
from gcmtal.graphbuild import SparseAdjacency

# One node with eight neighbors, all edge weights 1
rng = np.random.default_rng(1)
X = rng.uniform(-1, 1, (9, 4))
dense = np.zeros((9, 9))
dense[0, 1:] = 1.0
A = SparseAdjacency.from_dense(dense)

# Draw 4 neighbors with replacement, average, add the node itself
draws = np.stack([sampled_aggregate(0, X, A, 4, None, rng) for _ in range(10000)])
print(draws.mean(axis=0))
print(X[1:].mean(axis=0) + X[0])  # what the sampler estimates

# The spread of a single draw shrinks like 1 / sqrt(N_s)
for n_s in (1, 4, 16):
    d = np.stack([sampled_aggregate(0, X, A, n_s, None, rng) for _ in range(2000)])
    print(n_s, d.std(axis=0).mean())

# The whole-graph version: expectation over many draws is the mean operator
rng = np.random.default_rng(2)
dense = rng.uniform(0.1, 1, (6, 6)) * (rng.random((6, 6)) < 0.6)
A = SparseAdjacency.from_dense(dense)
mc = sum(sample_propagation(A, 4, rng).adjacency.to_dense() for _ in range(3000)) / 3000
print(np.abs(mc - enumerated_propagation(A).adjacency.to_dense()).max())

# Row sums: the sampled operator averages, the full one sums.  With
# cosine weights of about 0.6 and ten or so neighbors, the test-time
# operator is several times larger than what training saw.
print(mc.sum(axis=1))
print(full_propagation(A).adjacency.to_dense().sum(axis=1))
