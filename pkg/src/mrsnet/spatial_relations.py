"""Context-aware spatial relation modeling on the pixel grid.

Builds a row-normalized 8-connected adjacency over the H*W grid, averages
each pixel's neighborhood into context features, and refines them with a
shared per-node linear map (graph convolution) plus a final 1x1 convolution.
"""

import threading
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

_NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

_adjacency_cache = {}
_cache_lock = threading.Lock()


@dataclass
class AdjacencyMatrix:
    """Sparse row-stochastic 8-connectivity matrix over an H x W grid.

    Every row sums to 1, except the degenerate 1x1 grid whose single row is
    all-zero (a single pixel has no neighbors).  Self-loops are excluded.
    """

    matrix: torch.Tensor  # sparse COO, (N, N)
    height: int
    width: int

    @property
    def n(self):
        return self.height * self.width


def _build_entries(h, w):
    rows, cols = [], []
    grid = np.arange(h * w).reshape(h, w)
    for di, dj in _NEIGHBOR_OFFSETS:
        src_i = slice(max(0, -di), h - max(0, di))
        src_j = slice(max(0, -dj), w - max(0, dj))
        dst_i = slice(max(0, di), h + min(0, di))
        dst_j = slice(max(0, dj), w + min(0, dj))
        rows.append(grid[src_i, src_j].ravel())
        cols.append(grid[dst_i, dst_j].ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    degree = np.bincount(rows, minlength=h * w)
    values = 1.0 / degree[rows]
    return rows, cols, values


def build_adjacency(h: int, w: int, dtype=torch.float32) -> AdjacencyMatrix:
    """Row-normalized 8-connected grid adjacency, cached per (h, w, dtype)."""
    if h < 1 or w < 1:
        raise ValueError(f"grid sides must be >= 1, got {h}x{w}")
    key = (h, w, dtype)
    with _cache_lock:
        cached = _adjacency_cache.get(key)
    if cached is not None:
        return cached
    n = h * w
    if n == 1:
        indices = torch.zeros((2, 0), dtype=torch.long)
        values = torch.zeros(0, dtype=dtype)
    else:
        rows, cols, vals = _build_entries(h, w)
        indices = torch.from_numpy(np.stack([rows, cols])).long()
        values = torch.from_numpy(vals).to(dtype)
    matrix = torch.sparse_coo_tensor(indices, values, (n, n), check_invariants=True).coalesce()
    adjacency = AdjacencyMatrix(matrix=matrix, height=h, width=w)
    with _cache_lock:
        _adjacency_cache[key] = adjacency
    return adjacency


def aggregate_context(x_flat: torch.Tensor, adjacency: AdjacencyMatrix) -> torch.Tensor:
    """Average each pixel's neighbors: out[b, d, i] = sum_j A[i, j] x[b, d, j].

    Row-stochastic rows make this constant-preserving and linear.
    """
    b, dim, n = x_flat.shape
    if n != adjacency.n:
        raise ValueError(f"feature length {n} does not match adjacency size {adjacency.n}")
    matrix = adjacency.matrix.to(x_flat.dtype)
    out = torch.sparse.mm(matrix, x_flat.reshape(b * dim, n).t())
    return out.t().reshape(b, dim, n)


class GraphRefine(nn.Module):
    """Shared per-node linear map + ReLU, then the final 1x1 convolution."""

    def __init__(self, dim: int):
        super().__init__()
        self.graph_linear = nn.Conv1d(dim, dim, 1)
        self.out_conv = nn.Conv1d(dim, dim, 1)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        return self.out_conv(torch.relu(self.graph_linear(context)))


class SpatialRelationModel(nn.Module):
    """Full pipeline: adjacency aggregation followed by graph refinement."""

    def __init__(self, dim: int):
        super().__init__()
        self.refine = GraphRefine(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        adjacency = build_adjacency(h, w, dtype=x.dtype)
        context = aggregate_context(x.flatten(2), adjacency)
        return self.refine(context).reshape(b, c, h, w)
