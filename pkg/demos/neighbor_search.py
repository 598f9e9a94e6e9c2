"""Compare the neighbor-search strategies on one periodic 3D cloud."""

import time

import numpy as np

from sphbench.core import Domain
from sphbench.neighbors import build_cell_list, neighbor_pairs_bruteforce, neighbor_pairs_chunked

domain = Domain((1.0, 1.0, 1.0), (True, True, True))
x = np.random.default_rng(0).uniform(0, 1, (3000, 3))
cutoff = 0.1

start = time.perf_counter()
oracle = neighbor_pairs_bruteforce(x, domain, cutoff)
print(f"brute force: {len(oracle)} edges in {time.perf_counter() - start:.2f}s")

cells = build_cell_list(x, domain, cutoff, capacity=64)
for chunks in (1, 4, 16):
    start = time.perf_counter()
    edges = neighbor_pairs_chunked(cells, x, domain, cutoff, chunks)
    print(f"{chunks:2d} chunks: {len(edges)} edges, candidate buffer {edges.buffer_size}, "
          f"kept {len(edges) / edges.num_candidates:.1%} of candidates, "
          f"{time.perf_counter() - start:.2f}s")
