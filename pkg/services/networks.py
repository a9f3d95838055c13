"""
Node Classifiers
MLP, edge-weighted GraphSAGE and GIN over the edge->node input features,
with batch, layer or species-conditioned layer normalization
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from data.defaults import EDGE_DIM
from models import ModelConfig
from services import layers as nn
from services.autodiff import ParamStore, Tensor, constant
from services.errors import ConfigError, ShapeError
from services.graphstore import GraphDataset, NodeFeatures, species_descriptors
from services.sparse_ops import Adjacency, csr_weighted_mean, csr_weighted_sum

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ForwardInputs:
    """Everything a forward pass reads from the dataset"""

    x: np.ndarray
    adjacency: Adjacency
    edge_feat: np.ndarray
    descriptors: np.ndarray
    bn_rows: Optional[np.ndarray] = None

    @classmethod
    def from_graph(cls, g: GraphDataset, features: NodeFeatures,
                   bn_rows: Optional[np.ndarray] = None) -> 'ForwardInputs':
        """
        Args:
            g: dataset
            features: edge->node inputs of g
            bn_rows: rows whose statistics batch norm uses in train mode
                (the training split); None means all rows
        """
        if features.x.shape[0] != g.num_nodes:
            raise ShapeError(f"{features.x.shape[0]} feature rows for {g.num_nodes} nodes")
        return cls(
            x=features.x,
            adjacency=Adjacency.from_graph(g),
            edge_feat=g.edge_feat,
            descriptors=species_descriptors(g, features),
            bn_rows=bn_rows,
        )

    @property
    def num_nodes(self) -> int:
        return int(self.x.shape[0])


# ================================================
# SHAPES & PARAMETER COUNTS
# ================================================

def mlp_widths(cfg: ModelConfig) -> List[int]:
    """Hidden widths of the MLP blocks"""
    if cfg.mlp_shape == 'taper':
        return [max(cfg.hidden // 2 ** i, 1) for i in range(cfg.layers)]
    if cfg.mlp_shape == 'deep':
        return [cfg.hidden] * cfg.layers + [max(cfg.hidden // 2, 1)]
    return [cfg.hidden] * cfg.layers


def normalized_widths(cfg: ModelConfig) -> List[int]:
    """Width of every normalized hidden representation, in layer order"""
    if cfg.kind == 'mlp':
        return mlp_widths(cfg)
    return [cfg.hidden] * (cfg.layers - 1)


def _norm_parameters(cfg: ModelConfig, width: int) -> int:
    if cfg.norm in ('bn', 'ln'):
        return 2 * width
    if cfg.norm == 'cln':
        return 2 * cfg.desc_dim * width
    return 0


def count_parameters(cfg: ModelConfig, in_dim: int = EDGE_DIM) -> int:
    """
    Closed-form trainable parameter count

    Args:
        cfg: architecture
        in_dim: input feature width

    Returns:
        Number of scalars init_params would create
    """
    k = cfg.num_labels
    widths = normalized_widths(cfg)
    total = sum(_norm_parameters(cfg, w) for w in widths)
    if cfg.norm == 'cln' and widths:
        total += in_dim * cfg.desc_dim + cfg.desc_dim

    if cfg.kind == 'mlp':
        dims = [in_dim] + widths
        total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        return total + dims[-1] * k + k

    if cfg.edge_scalar == 'learned1d':
        total += EDGE_DIM + 1
    dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1)
    if cfg.kind == 'sage':
        total += sum(2 * a * b + b for a, b in zip(dims[:-1], dims[1:]))
        return total + 2 * dims[-1] * k + k
    # gin: two-layer update per hidden layer, affine output layer, one epsilon each
    total += sum(a * b + b + b * b + b + 1 for a, b in zip(dims[:-1], dims[1:]))
    return total + dims[-1] * k + k + 1


# ================================================
# INITIALIZATION
# ================================================

def _kaiming(rng: np.random.Generator, fan_in: int, fan_out: int, slope: float) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _add_linear(params: ParamStore, rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int,
                slope: float, bias: bool = True) -> None:
    params.add(f'{prefix}.weight', _kaiming(rng, fan_in, fan_out, slope))
    if bias:
        params.add(f'{prefix}.bias', np.zeros(fan_out))


def _add_norm(params: ParamStore, cfg: ModelConfig, index: int, width: int) -> None:
    prefix = f'norm.{index}'
    if cfg.norm in ('bn', 'ln'):
        params.add(f'{prefix}.gamma', np.ones(width))
        params.add(f'{prefix}.beta', np.zeros(width))
    if cfg.norm == 'bn':
        params.add_buffer(f'{prefix}.running_mean', np.zeros(width))
        params.add_buffer(f'{prefix}.running_var', np.ones(width))
    if cfg.norm == 'cln':
        params.add(f'{prefix}.u_gamma', np.zeros((cfg.desc_dim, width)))
        params.add(f'{prefix}.u_beta', np.zeros((cfg.desc_dim, width)))


def init_params(cfg: ModelConfig, in_dim: int = EDGE_DIM, rng: np.random.Generator = None) -> ParamStore:
    """
    Create and initialize all parameters of a model

    Weights use Kaiming-uniform for the leaky activation, biases and GIN
    epsilons start at zero, norm scales at one. Conditional-norm projections
    start at zero so every species begins with plain layer norm.

    Args:
        cfg: architecture
        in_dim: input feature width
        rng: random generator (seeded by the caller)

    Returns:
        ParamStore
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = ParamStore()
    widths = normalized_widths(cfg)
    if cfg.norm == 'cln' and widths:
        _add_linear(params, rng, 'cln.encoder', in_dim, cfg.desc_dim, cfg.slope)

    if cfg.kind == 'mlp':
        dims = [in_dim] + widths
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            _add_linear(params, rng, f'mlp.{i}', a, b, cfg.slope)
            _add_norm(params, cfg, i, b)
        _add_linear(params, rng, 'out', dims[-1], cfg.num_labels, cfg.slope)
        return params

    if cfg.edge_scalar == 'learned1d':
        _add_linear(params, rng, 'edge', EDGE_DIM, 1, cfg.slope)
    dims = [in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.num_labels]
    for layer, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        final = layer == cfg.layers - 1
        prefix = f'{cfg.kind}.{layer}'
        if cfg.kind == 'sage':
            params.add(f'{prefix}.w_self', _kaiming(rng, a, b, cfg.slope))
            params.add(f'{prefix}.w_neigh', _kaiming(rng, a, b, cfg.slope))
            params.add(f'{prefix}.bias', np.zeros(b))
        else:
            params.add(f'{prefix}.eps', np.zeros(1))
            if final:
                _add_linear(params, rng, f'{prefix}.out', a, b, cfg.slope)
            else:
                _add_linear(params, rng, f'{prefix}.mlp0', a, b, cfg.slope)
                _add_linear(params, rng, f'{prefix}.mlp1', b, b, cfg.slope)
        if not final:
            _add_norm(params, cfg, layer, b)
    return params


# ================================================
# EDGE SCALARIZATION
# ================================================

def scalarize(edge_feat: np.ndarray, cfg: ModelConfig, params: Optional[ParamStore] = None) -> np.ndarray:
    """
    Scalar edge weight(s) from 8-D edge features

    Args:
        edge_feat: one feature row (8,) or a matrix (E, 8)
        cfg: selects 'sum' (channel sum) or 'learned1d' (softplus(e . u + b))
        params: required for 'learned1d'

    Returns:
        float for a single row, else (E,) array
    """
    feat = np.asarray(edge_feat, dtype=np.float64)
    rows = feat.reshape(-1, EDGE_DIM)
    if cfg.edge_scalar == 'sum':
        alpha = rows.sum(axis=1)
    else:
        if params is None:
            raise ConfigError("learned1d scalarization needs parameters")
        alpha = np.logaddexp(0.0, rows @ params['edge.weight'].data[:, 0] + params['edge.bias'].data[0])
    return float(alpha[0]) if feat.ndim == 1 else alpha


def edge_weights(inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Edge weights as a tensor (learnable for 'learned1d')"""
    if cfg.edge_scalar == 'sum':
        return constant(inputs.edge_feat.sum(axis=1))
    return nn.softplus(nn.linear(constant(inputs.edge_feat), params['edge.weight'], params['edge.bias']))


# ================================================
# FORWARD PASSES
# ================================================

class _Pass:
    """State shared by the layers of one forward pass"""

    def __init__(self, inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore, mode: str,
                 rng: Optional[np.random.Generator]):
        if inputs.x.shape[1] == 0:
            raise ShapeError("input features are empty")
        self.inputs = inputs
        self.cfg = cfg
        self.params = params
        self.mode = mode
        self.rng = rng
        self.desc_embedding = None
        if cfg.norm == 'cln' and 'cln.encoder.weight' in params:
            self.desc_embedding = nn.leaky_relu(
                nn.linear(constant(inputs.descriptors), params['cln.encoder.weight'], params['cln.encoder.bias']),
                cfg.slope,
            )

    def normalize(self, h: Tensor, index: int) -> Tensor:
        cfg, params, prefix = self.cfg, self.params, f'norm.{index}'
        if cfg.norm == 'ln':
            return nn.layer_norm(h, params[f'{prefix}.gamma'], params[f'{prefix}.beta'], cfg.norm_eps)
        if cfg.norm == 'bn':
            stats = nn.BatchStats(params.buffers[f'{prefix}.running_mean'],
                                  params.buffers[f'{prefix}.running_var'], cfg.bn_momentum)
            return nn.batch_norm(h, params[f'{prefix}.gamma'], params[f'{prefix}.beta'], stats, self.mode,
                                 cfg.norm_eps, self.inputs.bn_rows)
        if cfg.norm == 'cln':
            return nn.conditional_layer_norm(h, self.desc_embedding, params[f'{prefix}.u_gamma'],
                                             params[f'{prefix}.u_beta'], cfg.norm_eps)
        return h

    def block(self, h: Tensor, index: int) -> Tensor:
        """norm -> activation -> dropout"""
        h = nn.leaky_relu(self.normalize(h, index), self.cfg.slope)
        return nn.dropout(h, self.cfg.dropout, self.mode, self.rng)


def mlp_forward(inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore, mode: str = nn.EVAL,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-node MLP on x; ignores the edges"""
    state = _Pass(inputs, cfg, params, mode, rng)
    h = constant(inputs.x)
    for i in range(len(mlp_widths(cfg))):
        h = state.block(nn.linear(h, params[f'mlp.{i}.weight'], params[f'mlp.{i}.bias']), i)
    return nn.linear(h, params['out.weight'], params['out.bias'])


def sage_forward(inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore, mode: str = nn.EVAL,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    GraphSAGE with an edge-weighted neighbour mean

    h' = h W_self + (sum_j a_ji h_j / sum_j a_ji) W_neigh + b; the last
    layer emits logits without norm, activation or dropout.
    """
    state = _Pass(inputs, cfg, params, mode, rng)
    alpha = edge_weights(inputs, cfg, params)
    adj = inputs.adjacency
    h = constant(inputs.x)
    for layer in range(cfg.layers):
        prefix = f'sage.{layer}'
        w_neigh = params[f'{prefix}.w_neigh']
        in_dim, out_dim = w_neigh.shape
        # aggregate on whichever side of the projection is narrower
        if in_dim <= out_dim:
            neigh = nn.linear(csr_weighted_mean(h, adj, alpha), w_neigh)
        else:
            neigh = csr_weighted_mean(nn.linear(h, w_neigh), adj, alpha)
        h = nn.add(nn.linear(h, params[f'{prefix}.w_self'], params[f'{prefix}.bias']), neigh)
        if layer < cfg.layers - 1:
            h = state.block(h, layer)
    return h


def gin_forward(inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore, mode: str = nn.EVAL,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    GIN with an edge-weighted neighbour sum

    z = (1 + eps) h + sum_j a_ji h_j, followed by a two-layer update on
    hidden layers and a single affine map on the last one.
    """
    state = _Pass(inputs, cfg, params, mode, rng)
    alpha = edge_weights(inputs, cfg, params)
    adj = inputs.adjacency
    h = constant(inputs.x)
    for layer in range(cfg.layers):
        prefix = f'gin.{layer}'
        one_plus_eps = nn.add_constant(params[f'{prefix}.eps'], 1.0)
        z = nn.add(nn.scale_by(h, one_plus_eps), csr_weighted_sum(h, adj, alpha))
        if layer == cfg.layers - 1:
            return nn.linear(z, params[f'{prefix}.out.weight'], params[f'{prefix}.out.bias'])
        z = nn.leaky_relu(nn.linear(z, params[f'{prefix}.mlp0.weight'], params[f'{prefix}.mlp0.bias']), cfg.slope)
        h = state.block(nn.linear(z, params[f'{prefix}.mlp1.weight'], params[f'{prefix}.mlp1.bias']), layer)
    return h


_FORWARDS = {'mlp': mlp_forward, 'sage': sage_forward, 'gin': gin_forward}


def forward(inputs: ForwardInputs, cfg: ModelConfig, params: ParamStore, mode: str = nn.EVAL,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Logits [N x K] for every node

    Args:
        inputs: dataset-derived inputs
        cfg: architecture
        params: parameters from init_params(cfg)
        mode: 'train' (dropout, batch statistics) or 'eval'
        rng: dropout generator, required in train mode when dropout > 0
    """
    logits = _FORWARDS[cfg.kind](inputs, cfg, params, mode, rng)
    if logits.shape != (inputs.num_nodes, cfg.num_labels):
        raise ShapeError(f"logits have shape {logits.shape}, expected {(inputs.num_nodes, cfg.num_labels)}")
    return logits
