"""Graph-guided patch aggregation.

Patches become graph nodes connected to spatial neighbours (centre distance
below ``tau``). Edges are weighted by cosine similarity of the patch
embeddings, each node receives one round of similarity-weighted messages, and
a learned softmax assignment pools the N nodes into K representative tokens.
Those K tokens serve as keys/values for attention, so queries stay at full
length while the attention cost drops from O(N^2 d) to O(N K d).

Graphs are stored sparsely (CSR, at most 27 entries per row on a unit grid).
"""
from __future__ import annotations

import functools
import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numerics import Tensor, ops

NEIGHBOUR_RADIUS = 1.8


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between matching rows of two ``[M, 3]`` arrays."""
    diff = a - b
    return np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])


def build_adjacency(centers: np.ndarray, tau: float = NEIGHBOUR_RADIUS) -> sp.csr_matrix:
    """Binary spatial adjacency: ``A[i, j] = 1`` iff ``i == j`` or ``|c_i - c_j| < tau``.

    Candidate pairs come from a uniform hash grid with cell size ``tau``, so
    only the 27 surrounding cells of each point are searched.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return sp.csr_matrix((0, 0), dtype=np.int8)
    cells = np.floor((pts - pts.min(axis=0)) / tau).astype(np.int64) + 1
    extent = cells.max(axis=0) + 2

    def encode(c):
        return (c[:, 0] * extent[1] + c[:, 1]) * extent[2] + c[:, 2]

    keys = encode(cells)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    rows_parts, cols_parts = [], []
    for off in itertools.product((-1, 0, 1), repeat=3):
        target = encode(cells + np.array(off))
        start = np.searchsorted(sorted_keys, target, side="left")
        stop = np.searchsorted(sorted_keys, target, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        src = np.repeat(np.arange(n), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        dst = order[np.repeat(start, counts) + offsets]
        keep = (src == dst) | (pairwise_distance(pts[src], pts[dst]) < tau)
        rows_parts.append(src[keep])
        cols_parts.append(dst[keep])
    rows = np.concatenate(rows_parts)
    cols = np.concatenate(cols_parts)
    adj = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj


def brute_force_adjacency(centers: np.ndarray, tau: float = NEIGHBOUR_RADIUS) -> np.ndarray:
    """O(N^2) reference for :func:`build_adjacency`, dense int8."""
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    hit = (i == j) | (pairwise_distance(pts[i], pts[j]) < tau)
    return hit.reshape(n, n).astype(np.int8)


def grid_centers(grid_dims: tuple[int, int, int]) -> np.ndarray:
    """Integer patch coordinates in row-major token order."""
    return np.indices(grid_dims).reshape(3, -1).T.astype(np.float64)


@functools.lru_cache(maxsize=32)
def grid_adjacency(grid_dims: tuple[int, int, int], tau: float = NEIGHBOUR_RADIUS) -> sp.csr_matrix:
    return build_adjacency(grid_centers(grid_dims), tau)


@dataclass
class SparseEdges:
    """Weighted graph on the sparsity pattern of a CSR adjacency."""

    indptr: np.ndarray
    indices: np.ndarray
    values: Tensor

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def rows(self) -> np.ndarray:
        return ops.csr_rows(self.indptr)

    @classmethod
    def from_adjacency(cls, adjacency: sp.csr_matrix, values: Tensor) -> "SparseEdges":
        return cls(adjacency.indptr, adjacency.indices, values)

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "SparseEdges":
        return cls(np.arange(n + 1), np.arange(n), Tensor(np.ones(n, dtype=dtype)))

    def to_dense(self) -> np.ndarray:
        return sp.csr_matrix((self.values.data, self.indices, self.indptr),
                             shape=(self.n, self.n)).toarray()


@dataclass
class PatchGraph:
    centers: np.ndarray
    node_features: Tensor
    spatial: sp.csr_matrix
    similarity: SparseEdges
    edges: SparseEdges


def similarity(node_features: Tensor, adjacency: sp.csr_matrix) -> SparseEdges:
    """Cosine similarity between node embeddings, evaluated on adjacent pairs only."""
    vals = ops.pair_cosine(node_features, ops.csr_rows(adjacency.indptr), adjacency.indices)
    return SparseEdges.from_adjacency(adjacency, vals)


def edge_weights(adjacency: sp.csr_matrix, sim: SparseEdges) -> SparseEdges:
    """Mask the similarity with the spatial adjacency (elementwise product)."""
    if sim.n != adjacency.shape[0] or len(sim.indices) != adjacency.nnz:
        raise ops.ShapeError("similarity and adjacency patterns differ")
    mask = adjacency.data.astype(sim.values.dtype)
    return SparseEdges(sim.indptr, sim.indices, ops.mul(sim.values, mask))


def build_graph(node_features: Tensor, centers: np.ndarray, tau: float = NEIGHBOUR_RADIUS,
                adjacency: sp.csr_matrix | None = None) -> PatchGraph:
    spatial = build_adjacency(centers, tau) if adjacency is None else adjacency
    sim = similarity(node_features, spatial)
    return PatchGraph(np.asarray(centers), node_features, spatial, sim, edge_weights(spatial, sim))


def message_pass(edges: SparseEdges, node_features: Tensor, x: Tensor) -> Tensor:
    """One contextual update: ``edges @ node_features + x``."""
    if node_features.shape != x.shape:
        raise ops.ShapeError(f"node features {node_features.shape} and X {x.shape} differ")
    if edges.n != x.shape[0]:
        raise ops.ShapeError(f"graph has {edges.n} nodes but X has {x.shape[0]} rows")
    return ops.add(ops.sparse_matmul(edges.values, edges.indptr, edges.indices, node_features), x)


def assign(x_enhanced: Tensor, w_s: Tensor) -> Tensor:
    """Row-stochastic soft assignment ``softmax(X~ W_s)`` of N patches to K nodes."""
    n, k = x_enhanced.shape[0], w_s.shape[-1]
    if k < 1:
        raise ValueError("K must be at least 1")
    if k > n:
        warnings.warn(f"over-complete assignment: K={k} exceeds N={n}", stacklevel=2)
    return ops.matmul_softmax(x_enhanced, w_s)


def aggregate(s: Tensor, x: Tensor) -> Tensor:
    """Pool patch features into K representative nodes: ``S^T X``."""
    if s.shape[0] != x.shape[0]:
        raise ops.ShapeError(f"assignment rows {s.shape[0]} != tokens {x.shape[0]}")
    return ops.matmul(ops.transpose(s), x)


def mpga_reduce(x: Tensor, grid_dims: tuple[int, int, int], w_s: Tensor,
                tau: float = NEIGHBOUR_RADIUS) -> tuple[Tensor, Tensor]:
    """Graph construction through aggregation; returns ``(pooled [K, d], S [N, K])``."""
    grid_dims = tuple(int(g) for g in grid_dims)
    if int(np.prod(grid_dims)) != x.shape[0]:
        raise ops.ShapeError(f"grid {grid_dims} does not hold {x.shape[0]} tokens")
    adjacency = grid_adjacency(grid_dims, float(tau))
    edges = edge_weights(adjacency, similarity(x, adjacency))
    x_enh = message_pass(edges, x, x)
    s = assign(x_enh, w_s)
    return aggregate(s, x), s


def reduced_attention(x: Tensor, pooled: Tensor, params: dict[str, Tensor], heads: int = 1) -> Tensor:
    """Attention with full-length queries from ``x`` and keys/values from ``pooled``."""
    q = ops.linear(x, params["wq"], params["bq"])
    k = ops.linear(pooled, params["wk"], params["bk"])
    v = ops.linear(pooled, params["wv"], params["bv"])
    out = ops.multi_head_attention(q, k, v, heads)
    return ops.linear(out, params["wo"], params["bo"])


def mpga_attention(x: Tensor, grid_dims: tuple[int, int, int], tau: float, params: dict[str, Tensor],
                   heads: int = 1, trace: dict | None = None) -> Tensor:
    """Sequence-reduced attention; ``params`` holds projections plus ``ws`` ([d, K]).

    When ``trace`` is given the assignment matrix is stored under ``"S"``.
    """
    pooled, s = mpga_reduce(x, grid_dims, params["ws"], tau)
    if trace is not None:
        trace["S"] = s
    return reduced_attention(x, pooled, params, heads)
