"""
Graph Store Service
Loads, validates and serves the species-split graph (incoming-edge CSR,
8-channel edge features, multi-label targets), builds edge->node input
features and generates synthetic species-split datasets.
"""

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from data.defaults import EDGE_DIM, SPLITS
from models import AGGR_KINDS, SynthSpec
from services.errors import ConfigError, DatasetParseError, DatasetValidationError, SplitMissingError
from services.parallel import get_num_threads, map_ordered

logger = logging.getLogger(__name__)

SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}
NODES_HEADER = ['node_id', 'species_id', 'split', 'labels']
EDGES_HEADER = ['src', 'dst'] + [f'f{c}' for c in range(EDGE_DIM)]

# Rows per worker task when aggregating in parallel
AGGREGATION_CHUNK = 4096


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Immutable CSR graph over incoming edges with labels, species and splits"""

    num_nodes: int
    num_edges: int
    csr_in_offsets: np.ndarray
    csr_in_sources: np.ndarray
    edge_feat: np.ndarray
    labels: np.ndarray
    species_id: np.ndarray
    split: np.ndarray
    species_split: bool = True

    @property
    def num_labels(self) -> int:
        return int(self.labels.shape[1])

    @property
    def node_ids(self) -> np.ndarray:
        return np.arange(self.num_nodes, dtype=np.int64)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return _frozen(np.diff(self.csr_in_offsets))

    @cached_property
    def edge_targets(self) -> np.ndarray:
        """Destination node of every edge, in CSR order"""
        return _frozen(np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.in_degree))

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for array in (self.csr_in_offsets, self.csr_in_sources, self.edge_feat,
                      self.labels, self.species_id, self.split):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()[:16]

    def split_index(self, name: str) -> np.ndarray:
        """Node indices of one split, ascending"""
        if name not in SPLIT_CODES:
            raise SplitMissingError(f"Unknown split {name!r}")
        return np.flatnonzero(self.split == SPLIT_CODES[name])

    def edge_list(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, feat) reconstructed from the CSR"""
        return self.csr_in_sources.copy(), self.edge_targets.copy(), self.edge_feat.copy()

    def summary(self) -> Dict[str, object]:
        return {
            'num_nodes': self.num_nodes,
            'num_edges': self.num_edges,
            'num_labels': self.num_labels,
            'fingerprint': self.fingerprint,
            'splits': {name: int((self.split == code).sum()) for name, code in SPLIT_CODES.items()},
            'species': {name: sorted(int(s) for s in np.unique(self.species_id[self.split == code]))
                        for name, code in SPLIT_CODES.items()},
        }

    def __repr__(self):
        return f'<GraphDataset nodes={self.num_nodes} edges={self.num_edges} K={self.num_labels}>'


@dataclass(frozen=True, eq=False)
class NodeFeatures:
    """Edge->node input features x (one row per node)"""

    x: np.ndarray
    aggr_kind: str

    def __repr__(self):
        return f'<NodeFeatures {self.x.shape} aggr={self.aggr_kind}>'


# ================================================
# CONSTRUCTION & VALIDATION
# ================================================

def build_graph(src: np.ndarray, dst: np.ndarray, feat: np.ndarray, labels: np.ndarray,
                species_id: np.ndarray, split: np.ndarray, species_split: bool = True) -> GraphDataset:
    """
    Build a validated GraphDataset from an edge list

    Edges are stored grouped by destination. Within a destination they are
    ordered canonically by (src, features) so the CSR, and everything
    aggregated from it, does not depend on input row order.

    Args:
        src, dst: edge endpoints (node indices)
        feat: edge features, one row per edge
        labels: binary label matrix, one row per node
        species_id: species per node
        split: split code per node (see SPLIT_CODES)
        species_split: require species-disjoint splits

    Returns:
        GraphDataset
    """
    labels = np.asarray(labels)
    num_nodes = int(labels.shape[0])
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    feat = np.asarray(feat, dtype=np.float64).reshape(-1, EDGE_DIM) if len(src) else np.zeros((0, EDGE_DIM))

    if src.shape != dst.shape or feat.shape[0] != src.shape[0]:
        raise DatasetValidationError("src, dst and edge features disagree in length")
    bad = (src < 0) | (src >= num_nodes) | (dst < 0) | (dst >= num_nodes)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise DatasetValidationError(
            f"Edge {first} ({src[first]}->{dst[first]}) references a node outside [0, {num_nodes})")
    if not np.all(np.isfinite(feat)) or feat.min(initial=0.0) < 0.0 or feat.max(initial=0.0) > 1.0:
        raise DatasetValidationError("Edge feature values must lie in [0, 1]")

    keys = [feat[:, c] for c in reversed(range(EDGE_DIM))] + [src, dst]
    order = np.lexsort(keys)
    counts = np.bincount(dst, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    graph = GraphDataset(
        num_nodes=num_nodes,
        num_edges=int(src.shape[0]),
        csr_in_offsets=_frozen(offsets),
        csr_in_sources=_frozen(src[order]),
        edge_feat=_frozen(feat[order]),
        labels=_frozen(labels.astype(np.uint8)),
        species_id=_frozen(np.asarray(species_id, dtype=np.int64)),
        split=_frozen(np.asarray(split, dtype=np.int8)),
        species_split=species_split,
    )
    validate_graph(graph)
    return graph


def validate_graph(g: GraphDataset) -> None:
    """Check every structural invariant; raises DatasetValidationError"""
    offsets = g.csr_in_offsets
    if offsets.shape != (g.num_nodes + 1,) or offsets[0] != 0:
        raise DatasetValidationError("csr_in_offsets must have num_nodes+1 entries starting at 0")
    if np.any(np.diff(offsets) < 0):
        raise DatasetValidationError("csr_in_offsets must be nondecreasing")
    if offsets[-1] != g.num_edges or g.csr_in_sources.shape != (g.num_edges,):
        raise DatasetValidationError("csr_in_offsets[num_nodes] must equal num_edges")
    if g.edge_feat.shape != (g.num_edges, EDGE_DIM):
        raise DatasetValidationError(f"edge_feat must be num_edges x {EDGE_DIM}")
    if g.num_edges and (g.edge_feat.min() < 0.0 or g.edge_feat.max() > 1.0):
        raise DatasetValidationError("Edge feature values must lie in [0, 1]")
    if g.labels.ndim != 2 or g.labels.shape[0] != g.num_nodes:
        raise DatasetValidationError("labels must be num_nodes x K")
    if np.any(g.labels > 1):
        raise DatasetValidationError("labels must be binary")
    if g.species_id.shape != (g.num_nodes,) or g.split.shape != (g.num_nodes,):
        raise DatasetValidationError("species_id and split need one entry per node")
    if np.any((g.split < 0) | (g.split >= len(SPLITS))):
        raise DatasetValidationError("split codes must be train/valid/test")
    if g.species_split:
        seen: Dict[int, str] = {}
        for name, code in SPLIT_CODES.items():
            for species in np.unique(g.species_id[g.split == code]):
                other = seen.setdefault(int(species), name)
                if other != name:
                    raise DatasetValidationError(
                        f"Species {int(species)} appears in both {other} and {name} splits")


# ================================================
# TSV INGESTION
# ================================================

def _check_header(path: Path, line: str, expected: List[str]) -> None:
    columns = line.rstrip('\n').split('\t')
    if columns != expected:
        raise DatasetParseError(path, 1, f"expected header {expected}, got {columns}")


def _read_nodes(path: Path):
    node_ids, species, splits, label_rows = [], [], [], []
    num_labels: Optional[int] = None
    with open(path, 'r', encoding='utf-8') as handle:
        header = handle.readline()
        _check_header(path, header, NODES_HEADER)
        for line_number, line in enumerate(handle, start=2):
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 4:
                raise DatasetParseError(path, line_number, f"expected 4 columns, got {len(parts)}")
            node_text, species_text, split_text, label_text = parts
            try:
                node_ids.append(int(node_text))
                species.append(int(species_text))
            except ValueError:
                raise DatasetParseError(path, line_number, "node_id and species_id must be integers")
            if split_text not in SPLIT_CODES:
                raise DatasetParseError(path, line_number, f"unknown split {split_text!r}")
            splits.append(SPLIT_CODES[split_text])
            if num_labels is None:
                num_labels = len(label_text)
            if len(label_text) != num_labels or num_labels == 0 or set(label_text) - {'0', '1'}:
                raise DatasetParseError(path, line_number,
                                        f"labels must be a {num_labels}-character 0/1 string")
            label_rows.append(np.frombuffer(label_text.encode('ascii'), dtype=np.uint8) - ord('0'))
    if not node_ids:
        raise DatasetValidationError(f"{path} contains no nodes")
    node_ids = np.asarray(node_ids, dtype=np.int64)
    order = np.argsort(node_ids, kind='stable')
    if not np.array_equal(node_ids[order], np.arange(len(node_ids))):
        raise DatasetValidationError(f"{path}: node ids must be exactly 0..{len(node_ids) - 1}")
    labels = np.vstack(label_rows)[order]
    return labels, np.asarray(species, dtype=np.int64)[order], np.asarray(splits, dtype=np.int8)[order]


def _locate_bad_edge_row(path: Path) -> None:
    """Slow scan that pinpoints the first malformed edge row"""
    with open(path, 'r', encoding='utf-8') as handle:
        handle.readline()
        for line_number, line in enumerate(handle, start=2):
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != len(EDGES_HEADER):
                raise DatasetParseError(path, line_number,
                                        f"expected {len(EDGES_HEADER)} columns, got {len(parts)}")
            try:
                int(parts[0])
                int(parts[1])
                [float(p) for p in parts[2:]]
            except ValueError:
                raise DatasetParseError(path, line_number, "src/dst must be integers, features reals")
    raise DatasetParseError(path, 0, "unparseable edges file")


def _read_edges(path: Path):
    with open(path, 'r', encoding='utf-8') as handle:
        _check_header(path, handle.readline(), EDGES_HEADER)
        has_rows = any(line.strip() for line in handle)
    if not has_rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, EDGE_DIM))
    try:
        table = np.loadtxt(path, delimiter='\t', skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError:
        _locate_bad_edge_row(path)
    if table.shape[1] != len(EDGES_HEADER):
        _locate_bad_edge_row(path)
    endpoints = table[:, :2]
    if np.any(endpoints != np.floor(endpoints)):
        _locate_bad_edge_row(path)
    feat = table[:, 2:]
    out_of_range = np.flatnonzero(~np.all((feat >= 0.0) & (feat <= 1.0), axis=1))
    if out_of_range.size:
        raise DatasetValidationError(
            f"{path}:{int(out_of_range[0]) + 2}: edge feature outside [0, 1]")
    return endpoints[:, 0].astype(np.int64), endpoints[:, 1].astype(np.int64), feat


def load_dataset(nodes_path, edges_path, species_split: bool = True) -> GraphDataset:
    """
    Load a dataset from the nodes.tsv / edges.tsv pair

    Args:
        nodes_path: TSV with node_id, species_id, split, labels
        edges_path: TSV with src, dst, f0..f7 (one directed edge per row)
        species_split: require species-disjoint splits

    Returns:
        Validated GraphDataset with CSR over incoming edges
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    labels, species, split = _read_nodes(nodes_path)
    src, dst, feat = _read_edges(edges_path)
    graph = build_graph(src, dst, feat, labels, species, split, species_split=species_split)
    logger.info(f"Loaded dataset nodes={graph.num_nodes} edges={graph.num_edges} "
                f"K={graph.num_labels} fingerprint={graph.fingerprint}")
    return graph


def save_dataset(g: GraphDataset, nodes_path, edges_path) -> None:
    """Write a dataset in the nodes.tsv / edges.tsv format"""
    Path(nodes_path).parent.mkdir(parents=True, exist_ok=True)
    with open(nodes_path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\t'.join(NODES_HEADER) + '\n')
        for node in range(g.num_nodes):
            label_text = ''.join('1' if v else '0' for v in g.labels[node])
            handle.write(f"{node}\t{int(g.species_id[node])}\t{SPLITS[g.split[node]]}\t{label_text}\n")
    src, dst, feat = g.edge_list()
    with open(edges_path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\t'.join(EDGES_HEADER) + '\n')
        for u, v, row in zip(src, dst, feat):
            handle.write(f"{u}\t{v}\t" + '\t'.join(f'{x:.17g}' for x in row) + '\n')
    logger.info(f"Wrote dataset to {nodes_path} and {edges_path}")


# ================================================
# EDGE -> NODE FEATURES
# ================================================

def _aggregate_range(g: GraphDataset, aggr: str, start: int, stop: int) -> np.ndarray:
    """Aggregate incoming edge features for nodes [start, stop)"""
    out = np.zeros((stop - start, EDGE_DIM), dtype=np.float64)
    offsets = g.csr_in_offsets[start:stop + 1]
    degree = np.diff(offsets)
    nonempty = degree > 0
    if not nonempty.any():
        return out
    feat = g.edge_feat[offsets[0]:offsets[-1]]
    starts = (offsets[:-1] - offsets[0])[nonempty]
    if aggr == 'max':
        out[nonempty] = np.maximum.reduceat(feat, starts, axis=0)
        return out
    out[nonempty] = np.add.reduceat(feat, starts, axis=0)
    if aggr == 'mean':
        out[nonempty] /= degree[nonempty, None]
    return out


def build_node_features(g: GraphDataset, aggr: str, num_threads: int = None) -> NodeFeatures:
    """
    Pool incoming 8-D edge features into one input row per node

    Isolated nodes get the all-zeros row for every aggregator.

    Args:
        g: dataset
        aggr: 'mean', 'sum' or 'max' (channelwise)
        num_threads: worker cap for per-node-range aggregation

    Returns:
        NodeFeatures
    """
    if aggr not in AGGR_KINDS:
        raise ConfigError(f"Unknown aggregator {aggr!r}")
    workers = num_threads or get_num_threads()
    bounds = list(range(0, g.num_nodes, AGGREGATION_CHUNK)) + [g.num_nodes]
    ranges = list(zip(bounds[:-1], bounds[1:]))
    if workers > 1 and len(ranges) > 1:
        parts = map_ordered(lambda r: _aggregate_range(g, aggr, r[0], r[1]), ranges, workers)
        x = np.vstack(parts)
    else:
        x = _aggregate_range(g, aggr, 0, g.num_nodes)
    return NodeFeatures(x=_frozen(x), aggr_kind=aggr)


def species_descriptors(g: GraphDataset, features: NodeFeatures) -> np.ndarray:
    """
    Per-node species descriptor: mean input feature over the node's species

    Each group is a (species, split) pair, so a descriptor only ever sees
    nodes of the split being evaluated; labels are never used.

    Returns:
        array [num_nodes x EDGE_DIM]
    """
    keys = np.stack([g.species_id, g.split.astype(np.int64)], axis=1)
    _, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.ravel()
    counts = np.bincount(group)
    sums = np.zeros((counts.size, features.x.shape[1]))
    np.add.at(sums, group, features.x)
    return _frozen((sums / counts[:, None])[group])


# ================================================
# SYNTHETIC SPECIES-SPLIT GENERATOR
# ================================================

def _unique_rows(pairs: np.ndarray) -> np.ndarray:
    if pairs.shape[0] == 0:
        return pairs.reshape(0, 2).astype(np.int64)
    return np.unique(pairs, axis=0)


def _sample_pairs(rng: np.random.Generator, n: int, density: float) -> np.ndarray:
    """Undirected pairs (u < v) among n nodes, each present with ~density"""
    possible = n * (n - 1) // 2
    count = int(rng.binomial(possible, density)) if possible else 0
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    raw = rng.integers(0, n, size=(count, 2))
    raw = raw[raw[:, 0] != raw[:, 1]]
    raw.sort(axis=1)
    return _unique_rows(raw)


def _edge_jaccard(labels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jaccard overlap of the endpoints' full label vectors, repeated on every channel"""
    yu = labels[u].astype(bool)
    yv = labels[v].astype(bool)
    inter = (yu & yv).sum(axis=1).astype(np.float64)
    union = (yu | yv).sum(axis=1).astype(np.float64)
    overlap = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return np.repeat(overlap[:, None], EDGE_DIM, axis=1)


def _routed_jaccard(labels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jaccard overlap per edge channel; label k is routed to channel k mod 8"""
    num_labels = labels.shape[1]
    routing = np.zeros((num_labels, EDGE_DIM))
    routing[np.arange(num_labels), np.arange(num_labels) % EDGE_DIM] = 1.0
    yu = labels[u].astype(bool)
    yv = labels[v].astype(bool)
    inter = (yu & yv).astype(np.float64) @ routing
    union = (yu | yv).astype(np.float64) @ routing
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def generate_synthetic(spec: SynthSpec, seed: int) -> GraphDataset:
    """
    Generate a deterministic species-split dataset

    Labels come from a per-species Bernoulli prototype with node-level flips.
    Undirected within-species edges (plus optional cross-species edges) are
    emitted in both directions with channel c = clamp(s * J + noise_c, 0, 1).
    J is the Jaccard overlap of the endpoints' label vectors, the same on
    every channel. With edge_channels='label_routed' channel c instead uses
    the overlap of the labels k with k mod 8 == c.
    The last two species form the valid and test splits.

    Args:
        spec: SynthSpec
        seed: RNG seed

    Returns:
        GraphDataset
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n_per, num_species, num_labels = spec.nodes_per_species, spec.num_species, spec.num_labels

    species = np.repeat(np.arange(num_species, dtype=np.int64), n_per)
    split = np.full(spec.num_nodes, SPLIT_CODES['train'], dtype=np.int8)
    split[species == num_species - 2] = SPLIT_CODES['valid']
    split[species == num_species - 1] = SPLIT_CODES['test']

    prototypes = rng.random((num_species, num_labels)) < spec.prototype_rate
    flips = rng.random((spec.num_nodes, num_labels)) < spec.label_noise
    labels = (prototypes[species] ^ flips).astype(np.uint8)

    pairs = []
    for s in range(num_species):
        local = _sample_pairs(rng, n_per, spec.edge_density)
        pairs.append(local + s * n_per)
    if spec.cross_species_rate > 0:
        cross = _sample_pairs(rng, spec.num_nodes, spec.edge_density * spec.cross_species_rate)
        pairs.append(cross[species[cross[:, 0]] != species[cross[:, 1]]])
    pairs = _unique_rows(np.vstack(pairs))

    u, v = pairs[:, 0], pairs[:, 1]
    overlap = _routed_jaccard if spec.edge_channels == 'label_routed' else _edge_jaccard
    noise = rng.normal(0.0, spec.edge_noise, size=(len(u), EDGE_DIM)) if spec.edge_noise > 0 else 0.0
    feat = np.clip(spec.signal * overlap(labels, u, v) + noise, 0.0, 1.0)

    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    feat = np.vstack([feat, feat])
    graph = build_graph(src, dst, feat, labels, species, split, species_split=True)
    logger.info(f"Generated synthetic dataset {spec!r} seed={seed} edges={graph.num_edges}")
    return graph
