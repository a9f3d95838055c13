"""
Sparse Message Passing
Edge-weighted neighbour sum and mean over the incoming-edge CSR, with
gradients for both node states and edge weights
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from services.autodiff import Tensor, record
from services.errors import ShapeError
from services.graphstore import GraphDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Incoming-edge structure of a graph: row = target, column = source"""

    num_nodes: int
    offsets: np.ndarray
    sources: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_graph(cls, g: GraphDataset) -> 'Adjacency':
        return cls(g.num_nodes, g.csr_in_offsets, g.csr_in_sources, g.edge_targets)

    @property
    def num_edges(self) -> int:
        return int(self.sources.size)

    def weighted(self, alpha: np.ndarray) -> sparse.csr_matrix:
        """Sparse matrix A with A[dst, src] = alpha of that edge"""
        return sparse.csr_matrix((alpha, self.sources, self.offsets), shape=(self.num_nodes, self.num_nodes))


def _edge_weights(alpha: Tensor, adj: Adjacency) -> np.ndarray:
    weights = alpha.data.reshape(-1)
    if weights.size != adj.num_edges:
        raise ShapeError(f"{weights.size} edge weights for {adj.num_edges} edges")
    return weights


def _edge_dots(a: np.ndarray, a_rows: np.ndarray, b: np.ndarray, b_rows: np.ndarray) -> np.ndarray:
    if a_rows.size == 0:
        return np.zeros(0)
    return np.einsum('ij,ij->i', a[a_rows], b[b_rows])


def csr_weighted_sum(h: Tensor, adj: Adjacency, alpha: Tensor) -> Tensor:
    """
    out[i] = sum over edges j->i of alpha_ji * h[j]

    Args:
        h: (N, F) node states
        adj: incoming-edge structure
        alpha: (E,) or (E, 1) edge weights in CSR order

    Returns:
        (N, F) tensor; isolated nodes get zero rows
    """
    if h.shape[0] != adj.num_nodes:
        raise ShapeError(f"{h.shape[0]} node rows for a {adj.num_nodes}-node graph")
    weights = _edge_weights(alpha, adj)
    matrix = adj.weighted(weights)
    out = matrix @ h.data

    def backward_fn(g):
        grad_h = matrix.T @ g if h.requires_grad else None
        grad_alpha = _edge_dots(g, adj.targets, h.data, adj.sources) if alpha.requires_grad else None
        return grad_h, grad_alpha

    return record('csr_weighted_sum', out, (h, alpha), backward_fn)


def csr_weighted_mean(h: Tensor, adj: Adjacency, alpha: Tensor) -> Tensor:
    """
    out[i] = sum_j alpha_ji h[j] / sum_j alpha_ji, zero when node i has no in-edges

    Args:
        h: (N, F) node states
        adj: incoming-edge structure
        alpha: (E,) or (E, 1) edge weights, positive where a node has in-edges

    Returns:
        (N, F) tensor
    """
    if h.shape[0] != adj.num_nodes:
        raise ShapeError(f"{h.shape[0]} node rows for a {adj.num_nodes}-node graph")
    weights = _edge_weights(alpha, adj)
    matrix = adj.weighted(weights)
    denom = np.asarray(matrix.sum(axis=1)).reshape(-1)
    # zero total weight behaves like an isolated node
    has_in = (np.diff(adj.offsets) > 0) & (denom > 0)
    inv = np.zeros_like(denom)
    inv[has_in] = 1.0 / denom[has_in]
    out = (matrix @ h.data) * inv[:, None]

    def backward_fn(g):
        scaled = g * inv[:, None]
        grad_h = matrix.T @ scaled if h.requires_grad else None
        grad_alpha = None
        if alpha.requires_grad:
            grad_alpha = (_edge_dots(scaled, adj.targets, h.data, adj.sources)
                          - _edge_dots(scaled, adj.targets, out, adj.targets))
        return grad_h, grad_alpha

    return record('csr_weighted_mean', out, (h, alpha), backward_fn)
