"""
Edge-weighted neighbour sum and mean over the incoming-edge CSR
"""

import numpy as np
import pytest

from services import layers as nn
from services.autodiff import Tensor, gradient_check
from services.errors import ShapeError
from services.sparse_ops import Adjacency, csr_weighted_mean, csr_weighted_sum


def dense_adjacency(adj, alpha):
    dense = np.zeros((adj.num_nodes, adj.num_nodes))
    np.add.at(dense, (adj.targets, adj.sources), alpha)
    return dense


class TestForward:

    def test_sum_matches_dense(self, small_graph):
        rng = np.random.default_rng(42)
        adj = Adjacency.from_graph(small_graph)
        h = rng.normal(size=(small_graph.num_nodes, 3))
        alpha = rng.uniform(0.1, 2.0, size=adj.num_edges)
        out = csr_weighted_sum(Tensor(h), adj, Tensor(alpha)).data
        np.testing.assert_allclose(out, dense_adjacency(adj, alpha) @ h, atol=1e-12)

    def test_mean_matches_dense(self, tiny_graph):
        rng = np.random.default_rng(42)
        adj = Adjacency.from_graph(tiny_graph)
        h = rng.normal(size=(6, 2))
        alpha = rng.uniform(0.1, 2.0, size=adj.num_edges)
        dense = dense_adjacency(adj, alpha)
        totals = dense.sum(axis=1, keepdims=True)
        expected = np.divide(dense @ h, totals, out=np.zeros((6, 2)), where=totals > 0)
        np.testing.assert_allclose(csr_weighted_mean(Tensor(h), adj, Tensor(alpha)).data, expected, atol=1e-12)

    def test_isolated_and_zero_weight_rows(self, tiny_graph):
        adj = Adjacency.from_graph(tiny_graph)
        h = Tensor(np.ones((6, 2)))
        alpha = np.ones(adj.num_edges)
        out = csr_weighted_mean(h, adj, Tensor(alpha)).data
        np.testing.assert_array_equal(out[4], [0.0, 0.0])
        alpha[adj.targets == 0] = 0.0
        out = csr_weighted_mean(h, adj, Tensor(alpha)).data
        np.testing.assert_array_equal(out[0], [0.0, 0.0])

    def test_mean_is_scale_invariant(self, small_graph):
        """Multiplying every weight by c leaves the mean unchanged"""
        rng = np.random.default_rng(42)
        adj = Adjacency.from_graph(small_graph)
        h = Tensor(rng.normal(size=(small_graph.num_nodes, 2)))
        alpha = rng.uniform(0.1, 1.0, size=adj.num_edges)
        base = csr_weighted_mean(h, adj, Tensor(alpha)).data
        np.testing.assert_allclose(csr_weighted_mean(h, adj, Tensor(2.0 * alpha)).data, base, atol=1e-12)

    def test_sum_is_linear_in_weights(self, small_graph):
        rng = np.random.default_rng(42)
        adj = Adjacency.from_graph(small_graph)
        h = Tensor(rng.normal(size=(small_graph.num_nodes, 2)))
        alpha = rng.uniform(0.1, 1.0, size=adj.num_edges)
        base = csr_weighted_sum(h, adj, Tensor(alpha)).data
        np.testing.assert_allclose(csr_weighted_sum(h, adj, Tensor(2.0 * alpha)).data, 2.0 * base, atol=1e-12)

    def test_weight_count_mismatch(self, tiny_graph):
        adj = Adjacency.from_graph(tiny_graph)
        with pytest.raises(ShapeError):
            csr_weighted_sum(Tensor(np.ones((6, 2))), adj, Tensor(np.ones(adj.num_edges + 1)))


class TestGradients:

    @pytest.mark.parametrize('op', [csr_weighted_sum, csr_weighted_mean])
    def test_node_and_edge_gradients(self, tiny_graph, op):
        rng = np.random.default_rng(42)
        adj = Adjacency.from_graph(tiny_graph)
        h = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        alpha = Tensor(rng.uniform(0.2, 1.5, size=(adj.num_edges, 1)), requires_grad=True)
        w = rng.normal(size=(6, 3))
        assert gradient_check(lambda: nn.weighted_sum(op(h, adj, alpha), w), [h, alpha]) < 1e-4
