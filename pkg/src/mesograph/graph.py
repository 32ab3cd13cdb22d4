"""Radius-neighbor cell graphs built with a uniform grid spatial index."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from mesograph.data import BagMeta, CellRecord

DEFAULT_RADIUS_UM = 30.0


def grid_neighbors(coords: np.ndarray, radius_um: float) -> Iterator[np.ndarray]:
    """Stream candidate index pairs from a uniform grid with cell size = radius.

    Yields (k, 2) int arrays. Each point is compared against points in its
    own bucket and the 8 adjacent buckets only, visiting every unordered
    bucket pair once, so the union of yields is a duplicate-free superset
    of all pairs at distance <= radius. Pairs are emitted with i < j.
    """
    if radius_um <= 0:
        raise ValueError(f"radius_um must be positive, got {radius_um}")
    n = len(coords)
    if n < 2:
        return
    keys = np.floor(coords / radius_um).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (gx, gy) in enumerate(keys):
        buckets.setdefault((int(gx), int(gy)), []).append(i)
    buckets_arr = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    # half-space of adjacent offsets: covers each unordered bucket pair once
    half = ((1, 0), (-1, 1), (0, 1), (1, 1))
    for key, idx in buckets_arr.items():
        if len(idx) > 1:
            ii, jj = np.triu_indices(len(idx), k=1)
            yield np.column_stack((idx[ii], idx[jj]))
        gx, gy = key
        for dx, dy in half:
            other = buckets_arr.get((gx + dx, gy + dy))
            if other is None:
                continue
            a = np.repeat(idx, len(other))
            b = np.tile(other, len(idx))
            lo = np.minimum(a, b)
            hi = np.maximum(a, b)
            yield np.column_stack((lo, hi))


def _radius_edges(coords: np.ndarray, radius_um: float) -> np.ndarray:
    """Sorted (m, 2) array of undirected pairs at distance <= radius, i < j."""
    chunks = []
    for cand in grid_neighbors(coords, radius_um):
        d2 = np.sum((coords[cand[:, 0]] - coords[cand[:, 1]]) ** 2, axis=1)
        keep = cand[d2 <= radius_um * radius_um]
        if len(keep):
            chunks.append(keep)
    if not chunks:
        return np.empty((0, 2), dtype=np.int64)
    edges = np.concatenate(chunks, axis=0)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


class DirectedAdjacency:
    """Both-direction edge arrays grouped by center node, for fast
    gather/scatter during message passing.

    Isolated nodes get a single synthetic self-edge so every node owns a
    non-empty contiguous segment (safe for reduceat) and still receives a
    zero-difference self message. Self-edges are an implementation detail
    of aggregation; they never appear in CellGraph.edges.
    """

    def __init__(self, n: int, edges: np.ndarray):
        self.n = n
        if len(edges):
            center = np.concatenate((edges[:, 0], edges[:, 1]))
            nbr = np.concatenate((edges[:, 1], edges[:, 0]))
        else:
            center = np.empty(0, dtype=np.int64)
            nbr = np.empty(0, dtype=np.int64)
        isolated = np.setdiff1d(np.arange(n, dtype=np.int64), center)
        center = np.concatenate((center, isolated))
        nbr = np.concatenate((nbr, isolated))
        order = np.lexsort((nbr, center))
        self.center = center[order]
        self.nbr = nbr[order]
        self.n_edges = len(self.center)
        deg = np.bincount(self.center, minlength=n).astype(np.float64)
        self.inv_deg = (1.0 / deg).reshape(n, 1) if n else np.empty((0, 1))
        self.starts = np.zeros(n, dtype=np.int64)
        if n:
            np.cumsum(deg[:-1].astype(np.int64), out=self.starts[1:])
        # position of each edge's reverse: keys are sorted by construction
        keys = self.center * n + self.nbr
        self.rev = np.searchsorted(keys, self.nbr * n + self.center)

    def sum_by_center(self, e: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.empty((0, e.shape[1]))
        return np.add.reduceat(e, self.starts, axis=0)

    def sum_by_nbr(self, e: np.ndarray) -> np.ndarray:
        return self.sum_by_center(e[self.rev])


@dataclass
class CellGraph:
    """One bag as a radius graph: immutable after construction.

    edges holds undirected pairs (i, j) with i < j, lexicographically
    sorted, no self loops, no duplicates; every pair satisfies
    dist(i, j) <= radius. Distinct cells at identical coordinates are
    connected (distance 0 is within any positive radius).
    """

    n: int
    coords: np.ndarray
    node_features: np.ndarray
    edges: np.ndarray
    radius_um: float
    bag_ref: Optional[BagMeta] = None
    _adjacency: Optional[DirectedAdjacency] = field(
        default=None, repr=False, compare=False
    )

    def adjacency(self) -> DirectedAdjacency:
        if self._adjacency is None:
            self._adjacency = DirectedAdjacency(self.n, self.edges)
        return self._adjacency


def build_radius_graph(
    cells: Sequence[CellRecord],
    radius_um: float = DEFAULT_RADIUS_UM,
    bag: Optional[BagMeta] = None,
) -> CellGraph:
    """Connect every pair of distinct cells within radius_um (inclusive)."""
    if radius_um <= 0:
        raise ValueError(f"radius_um must be positive, got {radius_um}")
    coords = np.array([[c.x_um, c.y_um] for c in cells], dtype=np.float64).reshape(
        len(cells), 2
    )
    feats = (
        np.stack([c.features for c in cells]).astype(np.float64)
        if cells
        else np.empty((0, 0))
    )
    edges = _radius_edges(coords, radius_um)
    return CellGraph(
        n=len(cells),
        coords=coords,
        node_features=feats,
        edges=edges,
        radius_um=radius_um,
        bag_ref=bag,
    )


def build_graphs(dataset, radius_um: float = DEFAULT_RADIUS_UM) -> list[CellGraph]:
    """Build one graph per bag, in dataset order."""
    return [build_radius_graph(cells, radius_um, bag) for bag, cells in dataset.bags]


def degree_stats(graph: CellGraph) -> tuple[int, float, int]:
    """(min, mean, max) node degree; all zero for the empty graph."""
    if graph.n == 0:
        return (0, 0.0, 0)
    deg = np.bincount(graph.edges.ravel(), minlength=graph.n)
    return (int(deg.min()), float(deg.mean()), int(deg.max()))


def write_edge_list(graph: CellGraph, edges_path, nodes_path) -> None:
    """Dump 'i j' edge lines plus an index/x/y node table for inspection."""
    with open(edges_path, "w", encoding="utf-8") as f:
        for i, j in graph.edges:
            f.write(f"{i} {j}\n")
    with open(nodes_path, "w", encoding="utf-8") as f:
        f.write("node,x_um,y_um\n")
        for k in range(graph.n):
            f.write(f"{k},{graph.coords[k, 0]!r},{graph.coords[k, 1]!r}\n")
