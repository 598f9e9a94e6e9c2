"""Fixed-radius neighbor search on periodic and non-periodic boxes.

Three interchangeable strategies are built on one cell list:

* :func:`neighbor_pairs_vectorized` materializes every candidate pair
  (``N * cand`` entries) before pruning to the cutoff.
* :func:`neighbor_pairs_chunked` splits the particles into ``M`` chunks and
  prunes each chunk before concatenation, so the candidate buffer never
  exceeds ``ceil(N / M) * cand``.
* :func:`padded_neighbor_pairs` handles batches with a varying number of
  particles and pads the edge arrays to a fixed length with a sentinel index.

:func:`neighbor_pairs_bruteforce` is the O(N^2) reference used in tests.

All strategies return directed edges, both ``(i, j)`` and ``(j, i)``, sorted by
sender then receiver. ``displacements[e]`` points from the sender to the
receiver: ``x[receivers[e]] - x[senders[e]]`` under minimum image.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Domain, periodic_displacement

DEFAULT_BUFFER_TARGET = 2**20
CAPACITY_SLACK = 1.25


class NeighborSearchError(RuntimeError):
    pass


class ConfigurationError(NeighborSearchError, ValueError):
    """Cutoff or cell grid incompatible with the domain."""


class CellOverflowError(NeighborSearchError):
    """A cell exceeded its fixed capacity; the cell list must be rebuilt."""


class CapacityError(NeighborSearchError, ValueError):
    """More particles than the padded capacity allows."""


@dataclass(frozen=True, eq=False)
class EdgeSet:
    senders: np.ndarray
    receivers: np.ndarray
    displacements: np.ndarray
    distances: np.ndarray
    num_candidates: int = -1
    buffer_size: int = -1
    sentinel: Optional[int] = None

    def __len__(self) -> int:
        return int(self.senders.shape[0])

    @property
    def real_mask(self) -> np.ndarray:
        if self.sentinel is None:
            return np.ones(len(self), dtype=bool)
        return self.senders != self.sentinel

    @property
    def num_real(self) -> int:
        return int(self.real_mask.sum())

    def canonical(self) -> "EdgeSet":
        order = np.lexsort((self.receivers, self.senders))
        return self._take(order)

    def strip_padding(self) -> "EdgeSet":
        if self.sentinel is None:
            return self
        es = self._take(np.flatnonzero(self.real_mask))
        return EdgeSet(
            es.senders, es.receivers, es.displacements, es.distances,
            self.num_candidates, self.buffer_size, None,
        )

    def select(self, mask: np.ndarray) -> "EdgeSet":
        return self._take(np.flatnonzero(mask))

    def pairs(self) -> set:
        m = self.real_mask
        return set(zip(self.senders[m].tolist(), self.receivers[m].tolist()))

    def _take(self, idx) -> "EdgeSet":
        return EdgeSet(
            np.take(self.senders, idx),
            np.take(self.receivers, idx),
            np.take(self.displacements, idx, axis=0),
            np.take(self.distances, idx),
            self.num_candidates,
            self.buffer_size,
            self.sentinel,
        )

    @classmethod
    def empty(cls, dim: int) -> "EdgeSet":
        return cls(
            np.zeros(0, np.int64),
            np.zeros(0, np.int64),
            np.zeros((0, dim)),
            np.zeros(0),
            0,
            0,
        )


@dataclass(frozen=True)
class CellList:
    """Uniform cell grid with a fixed per-cell capacity.

    ``cell_index`` maps each particle to its cell, ``occupancy`` is the
    ``[C, capacity]`` table of particle ids (padded with ``N``), and
    ``neighbor_cells`` lists the ``3**dim`` reachable cells of every cell,
    ``-1`` marking offsets that fall outside a non-periodic axis.
    """

    cutoff: float
    cell_size: np.ndarray
    grid_shape: tuple
    cell_index: np.ndarray
    occupancy: np.ndarray
    counts: np.ndarray
    neighbor_cells: np.ndarray
    capacity: int
    overflow: bool
    n_particles: int

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def cand(self) -> int:
        """Candidate slots per cell: capacity times reachable cells."""
        return self.capacity * self.neighbor_cells.shape[1]

    def candidate_table(self) -> np.ndarray:
        """``[C, cand]`` table of candidate particle ids, padded with ``N``."""
        n = self.n_particles
        nc = self.neighbor_cells
        padded = np.vstack([self.occupancy, np.full((1, self.capacity), n, np.int64)])
        return padded[np.where(nc < 0, self.num_cells, nc)].reshape(self.num_cells, -1)


def _grid_shape(domain: Domain, cutoff: float) -> tuple:
    shape = []
    for extent, periodic in zip(domain.extents, domain.periodic):
        n = max(1, int(math.floor(extent / cutoff)))
        if periodic and n < 3:
            raise ConfigurationError(
                f"cutoff {cutoff} too large for periodic extent {extent}: "
                "need at least 3 cells per periodic axis"
            )
        shape.append(n)
    return tuple(shape)


def _neighbor_cell_table(grid_shape: tuple, periodic: tuple) -> np.ndarray:
    dim = len(grid_shape)
    coords = np.stack(
        np.meshgrid(*[np.arange(n) for n in grid_shape], indexing="ij"), axis=-1
    ).reshape(-1, dim)
    offsets = np.array(list(itertools.product((-1, 0, 1), repeat=dim)))
    nb = coords[:, None, :] + offsets[None, :, :]
    valid = np.ones(nb.shape[:2], dtype=bool)
    shape = np.array(grid_shape)
    for ax in range(dim):
        if periodic[ax]:
            nb[..., ax] %= shape[ax]
        else:
            valid &= (nb[..., ax] >= 0) & (nb[..., ax] < shape[ax])
    nb = np.where(valid[..., None], nb, 0)
    flat = np.ravel_multi_index(tuple(nb[..., ax] for ax in range(dim)), grid_shape)
    # periodic axes have >= 3 cells, so no reachable cell appears twice
    flat = np.where(valid, flat, -1)
    return flat.astype(np.int64)


def default_capacity(n: int, num_cells: int) -> int:
    expected = n / max(num_cells, 1)
    return max(1, int(math.ceil(CAPACITY_SLACK * expected)))


def build_cell_list(
    positions, domain: Domain, cutoff: float, capacity: Optional[int] = None
) -> CellList:
    """Bin particles into cells of size at least ``cutoff``.

    With ``capacity=None`` the capacity is ``ceil(1.25 * N / C)``. If any cell
    holds more particles the result carries ``overflow=True``.
    """
    if not cutoff > 0:
        raise ConfigurationError("cutoff must be positive")
    x = np.asarray(positions, dtype=np.float64).reshape(-1, domain.dim)
    n = x.shape[0]
    grid_shape = _grid_shape(domain, cutoff)
    shape = np.array(grid_shape)
    cell_size = domain.lengths / shape
    num_cells = int(np.prod(shape))
    if capacity is None:
        capacity = default_capacity(n, num_cells)

    if n:
        idx = np.floor(x / cell_size).astype(np.int64)
        for ax in range(domain.dim):
            if domain.periodic[ax]:
                idx[:, ax] %= shape[ax]
            else:
                np.clip(idx[:, ax], 0, shape[ax] - 1, out=idx[:, ax])
        cell_index = np.ravel_multi_index(tuple(idx.T), grid_shape).astype(np.int64)
    else:
        cell_index = np.zeros(0, dtype=np.int64)

    counts = np.bincount(cell_index, minlength=num_cells)
    order = np.argsort(cell_index, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(n) - starts[cell_index[order]]
    overflow = bool(counts.max(initial=0) > capacity)
    occupancy = np.full((num_cells, capacity), n, dtype=np.int64)
    keep = rank < capacity
    occupancy[cell_index[order][keep], rank[keep]] = order[keep]

    return CellList(
        cutoff=float(cutoff),
        cell_size=cell_size,
        grid_shape=grid_shape,
        cell_index=cell_index,
        occupancy=occupancy,
        counts=counts,
        neighbor_cells=_neighbor_cell_table(grid_shape, domain.periodic),
        capacity=int(capacity),
        overflow=overflow,
        n_particles=n,
    )


def _require_valid(cell_list: CellList) -> None:
    if cell_list.overflow:
        raise CellOverflowError(
            f"cell capacity {cell_list.capacity} exceeded "
            f"(max occupancy {int(cell_list.counts.max())}); rebuild required"
        )


def _prune(ids, cand_table, cell_list, x, domain, cutoff):
    """Candidate buffer for particles ``ids`` pruned to the cutoff."""
    n = x.shape[0]
    cand = cand_table[cell_list.cell_index[ids]]  # [m, cand]
    valid = (cand < n) & (cand != ids[:, None])
    num_candidates = int(valid.sum())
    safe = np.where(valid, cand, ids[:, None])
    # receivers are the rows, senders the candidates
    d = periodic_displacement(domain, x[ids][:, None, :], x[safe])
    r2 = np.einsum("ijk,ijk->ij", d, d)
    keep = valid & (r2 <= cutoff * cutoff)
    rows, cols = np.nonzero(keep)
    receivers = ids[rows]
    senders = cand[rows, cols]
    disp = d[rows, cols]
    return senders, receivers, disp, num_candidates, cand.size


def _assemble(parts, dim, num_candidates, buffer_size) -> EdgeSet:
    if parts:
        s = np.concatenate([p[0] for p in parts])
        r = np.concatenate([p[1] for p in parts])
        d = np.concatenate([p[2] for p in parts])
    else:
        s = r = np.zeros(0, np.int64)
        d = np.zeros((0, dim))
    order = np.lexsort((r, s))
    s, r, d = s[order], r[order], d[order]
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    return EdgeSet(
        s.astype(np.int64), r.astype(np.int64), d, dist, num_candidates, buffer_size
    )


def neighbor_pairs_vectorized(
    cell_list: CellList, positions, domain: Domain, cutoff: float
) -> EdgeSet:
    """All pairs within ``cutoff`` from one ``[N, cand]`` candidate buffer."""
    _require_valid(cell_list)
    x = np.asarray(positions, dtype=np.float64).reshape(-1, domain.dim)
    n = x.shape[0]
    if n == 0:
        return EdgeSet.empty(domain.dim)
    table = cell_list.candidate_table()
    s, r, d, nc, buf = _prune(np.arange(n), table, cell_list, x, domain, cutoff)
    return _assemble([(s, r, d)], domain.dim, nc, buf)


def neighbor_pairs_chunked(
    cell_list: CellList, positions, domain: Domain, cutoff: float, num_chunks: int
) -> EdgeSet:
    """Same edges as the vectorized search, pruned chunk by chunk.

    Particles (not cells) are split into ``num_chunks`` contiguous parts.
    """
    _require_valid(cell_list)
    if not 1 <= num_chunks <= cell_list.num_cells:
        raise ConfigurationError(
            f"chunk count must lie in [1, {cell_list.num_cells}], got {num_chunks}"
        )
    x = np.asarray(positions, dtype=np.float64).reshape(-1, domain.dim)
    n = x.shape[0]
    if n == 0:
        return EdgeSet.empty(domain.dim)
    table = cell_list.candidate_table()
    parts = []
    total_candidates = 0
    peak = 0
    for ids in np.array_split(np.arange(n), num_chunks):
        if ids.size == 0:
            continue
        s, r, d, nc, buf = _prune(ids, table, cell_list, x, domain, cutoff)
        parts.append((s, r, d))
        total_candidates += nc
        peak = max(peak, buf)
    return _assemble(parts, domain.dim, total_candidates, peak)


def neighbor_pairs_bruteforce(positions, domain: Domain, cutoff: float) -> EdgeSet:
    """O(N^2) reference search."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, domain.dim)
    n = x.shape[0]
    parts = []
    block = 256
    for start in range(0, n, block):
        rec = np.arange(start, min(start + block, n))
        d = periodic_displacement(domain, x[rec][:, None, :], x[None, :, :])
        r2 = np.einsum("ijk,ijk->ij", d, d)
        keep = r2 <= cutoff * cutoff
        keep[np.arange(rec.size), rec] = False
        rows, cols = np.nonzero(keep)
        parts.append((cols, rec[rows], d[rows, cols]))
    return _assemble(parts, domain.dim, n * max(n - 1, 0), n * n)


def default_num_chunks(cell_list: CellList, target: int = DEFAULT_BUFFER_TARGET) -> int:
    full = cell_list.n_particles * cell_list.cand
    m = max(1, int(math.ceil(full / target)))
    return min(m, cell_list.num_cells)


def neighbor_search(
    positions,
    domain: Domain,
    cutoff: float,
    strategy: str = "chunked",
    capacity: Optional[int] = None,
    num_chunks: Optional[int] = None,
) -> EdgeSet:
    """Search with automatic rebuild-and-grow when a cell overflows."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, domain.dim)
    if strategy == "bruteforce":
        return neighbor_pairs_bruteforce(x, domain, cutoff)
    cl = build_cell_list(x, domain, cutoff, capacity)
    if cl.overflow:
        needed = int(math.ceil(CAPACITY_SLACK * cl.counts.max()))
        cl = build_cell_list(x, domain, cutoff, needed)
    if strategy == "vectorized":
        return neighbor_pairs_vectorized(cl, x, domain, cutoff)
    if strategy == "chunked":
        m = default_num_chunks(cl) if num_chunks is None else num_chunks
        return neighbor_pairs_chunked(cl, x, domain, cutoff, m)
    raise ValueError(f"unknown neighbor strategy {strategy!r}")


def padded_neighbor_pairs(
    positions: Sequence,
    max_n: int,
    domain: Domain,
    cutoff: float,
    max_edges: Optional[int] = None,
) -> list:
    """Edge sets for a batch of systems with different particle counts.

    Every returned :class:`EdgeSet` has the same length: ``max_edges`` if
    given, otherwise the largest real edge count in the batch. Padding rows
    use ``max_n`` as sender and receiver and a zero displacement.
    """
    results = []
    for x in positions:
        x = np.asarray(x, dtype=np.float64).reshape(-1, domain.dim)
        if x.shape[0] > max_n:
            raise CapacityError(f"{x.shape[0]} particles exceed max_n={max_n}")
        results.append(neighbor_search(x, domain, cutoff, strategy="vectorized"))
    longest = max((len(e) for e in results), default=0)
    size = longest if max_edges is None else int(max_edges)
    if size < longest:
        raise CapacityError(f"{longest} edges exceed max_edges={size}")
    padded = []
    for es in results:
        pad = size - len(es)
        padded.append(
            EdgeSet(
                np.concatenate([es.senders, np.full(pad, max_n, np.int64)]),
                np.concatenate([es.receivers, np.full(pad, max_n, np.int64)]),
                np.concatenate([es.displacements, np.zeros((pad, domain.dim))]),
                np.concatenate([es.distances, np.zeros(pad)]),
                es.num_candidates,
                es.buffer_size,
                max_n,
            )
        )
    return padded


def pad_positions(x, max_n: int, fill: float = 0.0):
    """Pad ``[N, dim]`` positions to ``[max_n, dim]``; returns (padded, mask)."""
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if n > max_n:
        raise CapacityError(f"{n} particles exceed max_n={max_n}")
    out = np.full((max_n, dim), fill)
    out[:n] = x
    mask = np.zeros(max_n, dtype=bool)
    mask[:n] = True
    return out, mask


class VerletList:
    """Neighbor list with a skin, rebuilt only when particles moved far enough.

    Between rebuilds the stored pairs are re-measured and pruned to the true
    cutoff, so every returned :class:`EdgeSet` is exact as long as no particle
    moved more than ``skin / 2`` since the last build.
    """

    def __init__(self, domain: Domain, cutoff: float, skin: float, pair_filter=None):
        self.domain = domain
        self.cutoff = float(cutoff)
        self.skin = float(skin)
        self.pair_filter = pair_filter
        self._ref = None
        self._senders = None
        self._receivers = None
        self.rebuilds = 0

    def _rebuild(self, x):
        es = neighbor_search(x, self.domain, self.cutoff + self.skin)
        s, r = es.senders, es.receivers
        if self.pair_filter is not None:
            keep = self.pair_filter(s, r)
            s, r = s[keep], r[keep]
        self._senders, self._receivers = s, r
        self._ref = x.copy()
        self.rebuilds += 1

    def update(self, positions) -> EdgeSet:
        x = np.asarray(positions, dtype=np.float64)
        if self._ref is None or self._ref.shape != x.shape:
            self._rebuild(x)
        else:
            moved = periodic_displacement(self.domain, x, self._ref)
            if np.max(np.einsum("ij,ij->i", moved, moved), initial=0.0) > (
                0.5 * self.skin
            ) ** 2:
                self._rebuild(x)
        s, r = self._senders, self._receivers
        d = periodic_displacement(
            self.domain, np.take(x, r, axis=0), np.take(x, s, axis=0)
        )
        dist = np.sqrt(np.einsum("ij,ij->i", d, d))
        keep = dist <= self.cutoff
        return EdgeSet(
            np.compress(keep, s),
            np.compress(keep, r),
            np.compress(keep, d, axis=0),
            np.compress(keep, dist),
        )
