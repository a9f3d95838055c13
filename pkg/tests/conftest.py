"""
Shared fixtures: a handcrafted six-node graph and a small synthetic dataset
"""

import numpy as np
import pytest

from models import SynthSpec
from services.graphstore import SPLIT_CODES, build_graph, generate_synthetic, save_dataset
from data import defaults


def _one_hot_feat(channel: int, value: float = 1.0) -> np.ndarray:
    row = np.zeros(defaults.EDGE_DIM)
    row[channel] = value
    return row


@pytest.fixture
def tiny_graph():
    """
    Six nodes, three species (one per split), K = 2

    Edges: 1->0, 2->0, 0->1, 3->2, 2->3, 4->5; node 4 has no in-edges.
    """
    src = np.array([1, 2, 0, 3, 2, 4])
    dst = np.array([0, 0, 1, 2, 3, 5])
    feat = np.vstack([
        _one_hot_feat(0),
        _one_hot_feat(1),
        _one_hot_feat(0, 0.5),
        np.full(defaults.EDGE_DIM, 0.25),
        _one_hot_feat(2, 0.75),
        _one_hot_feat(3, 0.5),
    ])
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 1], [1, 0], [0, 1]])
    species = np.array([0, 0, 1, 1, 2, 2])
    split = np.array([SPLIT_CODES['train']] * 2 + [SPLIT_CODES['valid']] * 2 + [SPLIT_CODES['test']] * 2)
    return build_graph(src, dst, feat, labels, species, split)


@pytest.fixture(scope='session')
def small_spec():
    return SynthSpec(num_species=3, nodes_per_species=30, num_labels=4, edge_density=0.2, signal=0.8)


@pytest.fixture(scope='session')
def small_graph(small_spec):
    return generate_synthetic(small_spec, seed=7)


@pytest.fixture
def data_dir(tmp_path, small_graph):
    """small_graph written as nodes.tsv / edges.tsv"""
    path = tmp_path / 'data'
    save_dataset(small_graph, path / defaults.NODES_FILE, path / defaults.EDGES_FILE)
    return path
