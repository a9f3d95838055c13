"""
Configuration Models
Dataclasses describing a model architecture, a training run, a synthetic
dataset and the post-hoc calibration stack. Each serializes verbatim into
the run documents (args.json, calibration.json).
"""

from dataclasses import dataclass, asdict, fields
from typing import Any, Dict, Optional

from data import defaults
from services.errors import ConfigError

MODEL_KINDS = ('mlp', 'sage', 'gin')
NORM_KINDS = ('bn', 'ln', 'cln', 'none')
AGGR_KINDS = ('mean', 'sum', 'max')
EDGE_SCALARS = ('sum', 'learned1d')
MLP_SHAPES = ('uniform', 'taper', 'deep')
CALIBRATION_MODES = ('global', 'per_label')
COOC_VARIANTS = ('conditional', 'conditional_centered')
EDGE_CHANNEL_MODES = ('jaccard', 'label_routed')


def _check_choice(name: str, value: str, choices) -> None:
    if value not in choices:
        raise ConfigError(f"{name}={value!r} not in {list(choices)}")


@dataclass
class ModelConfig:
    """Architecture hyperparameters"""

    kind: str = 'sage'
    norm: str = 'ln'
    layers: int = defaults.DEFAULT_LAYERS
    hidden: int = defaults.DEFAULT_HIDDEN
    dropout: float = defaults.DEFAULT_DROPOUT
    edge_scalar: str = 'sum'
    x_aggr: str = 'sum'
    num_labels: int = defaults.LABELS_FULL
    mlp_shape: str = 'uniform'
    cln_desc_dim: Optional[int] = None
    slope: float = defaults.LEAKY_SLOPE
    norm_eps: float = defaults.NORM_EPS
    bn_momentum: float = defaults.BN_MOMENTUM

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _check_choice('model', self.kind, MODEL_KINDS)
        _check_choice('norm', self.norm, NORM_KINDS)
        _check_choice('x_aggr', self.x_aggr, AGGR_KINDS)
        _check_choice('edge_scalar', self.edge_scalar, EDGE_SCALARS)
        _check_choice('mlp_shape', self.mlp_shape, MLP_SHAPES)
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.num_labels < 1:
            raise ConfigError(f"num_labels must be >= 1, got {self.num_labels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"slope must be in (0, 1), got {self.slope}")
        if self.cln_desc_dim is not None and self.cln_desc_dim < 1:
            raise ConfigError(f"cln_desc_dim must be >= 1, got {self.cln_desc_dim}")

    @property
    def desc_dim(self) -> int:
        """Width of the species-descriptor embedding used by CLN"""
        return self.cln_desc_dim if self.cln_desc_dim is not None else self.hidden

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.kind,
            'norm': self.norm,
            'x_aggr': self.x_aggr,
            'edge_scalar': self.edge_scalar,
            'hid': self.hidden,
            'layers': self.layers,
            'dropout': self.dropout,
            'num_labels': self.num_labels,
            'mlp_shape': self.mlp_shape,
            'cln_desc_dim': self.cln_desc_dim,
            'slope': self.slope,
            'norm_eps': self.norm_eps,
            'bn_momentum': self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> 'ModelConfig':
        return cls(
            kind=doc['model'],
            norm=doc['norm'],
            x_aggr=doc['x_aggr'],
            edge_scalar=doc['edge_scalar'],
            hidden=doc['hid'],
            layers=doc['layers'],
            dropout=doc.get('dropout', defaults.DEFAULT_DROPOUT),
            num_labels=doc['num_labels'],
            mlp_shape=doc.get('mlp_shape', 'uniform'),
            cln_desc_dim=doc.get('cln_desc_dim'),
            slope=doc.get('slope', defaults.LEAKY_SLOPE),
            norm_eps=doc.get('norm_eps', defaults.NORM_EPS),
            bn_momentum=doc.get('bn_momentum', defaults.BN_MOMENTUM),
        )

    def __repr__(self):
        return f'<ModelConfig {self.kind}/{self.norm} L={self.layers} h={self.hidden} x={self.x_aggr}>'


@dataclass
class TrainConfig:
    """Training-loop settings"""

    lr: float = defaults.DEFAULT_LR
    epochs: int = defaults.DEFAULT_EPOCHS
    patience: int = defaults.DEFAULT_PATIENCE
    seed: int = 1
    eval_every: int = defaults.DEFAULT_EVAL_EVERY
    out_dir: Optional[str] = None
    ece_bins: int = defaults.ECE_BINS
    beta1: float = defaults.ADAM_BETA1
    beta2: float = defaults.ADAM_BETA2
    adam_eps: float = defaults.ADAM_EPS

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.ece_bins < 1:
            raise ConfigError(f"ece_bins must be >= 1, got {self.ece_bins}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> 'TrainConfig':
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass
class SynthSpec:
    """Shape of a synthetic species-split dataset"""

    num_species: int = 3
    nodes_per_species: int = 500
    num_labels: int = 16
    edge_density: float = 0.01
    signal: float = 0.8
    prototype_rate: float = 0.3
    label_noise: float = 0.1
    edge_noise: float = 0.05
    cross_species_rate: float = 0.0
    edge_channels: str = 'jaccard'

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _check_choice('edge_channels', self.edge_channels, EDGE_CHANNEL_MODES)
        if self.num_species < 3:
            raise ConfigError(f"num_species must be >= 3 (one per split), got {self.num_species}")
        if self.nodes_per_species < 2:
            raise ConfigError(f"nodes_per_species must be >= 2, got {self.nodes_per_species}")
        if self.num_labels < 1:
            raise ConfigError(f"num_labels must be >= 1, got {self.num_labels}")
        if not 0.0 < self.edge_density <= 1.0:
            raise ConfigError(f"edge_density must be in (0, 1], got {self.edge_density}")
        for name in ('signal', 'prototype_rate', 'label_noise', 'edge_noise', 'cross_species_rate'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")

    @property
    def num_nodes(self) -> int:
        return self.num_species * self.nodes_per_species

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def __repr__(self):
        return f'<SynthSpec {self.num_species}x{self.nodes_per_species} K={self.num_labels} s={self.signal}>'


@dataclass
class CalibrationConfig:
    """Post-hoc decision stack settings"""

    mode: str = 'per_label'
    l2: float = defaults.DEFAULT_L2
    beta: float = defaults.DEFAULT_BETA
    bins: int = defaults.ECE_BINS
    smooth_lambda: Optional[float] = None
    tune_smoothing: bool = False
    cooc_variant: str = 'conditional_centered'
    min_positives: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _check_choice('mode', self.mode, CALIBRATION_MODES)
        _check_choice('cooc_variant', self.cooc_variant, COOC_VARIANTS)
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if self.smooth_lambda is not None and self.smooth_lambda < 0:
            raise ConfigError(f"smooth_lambda must be >= 0, got {self.smooth_lambda}")
        if self.min_positives < 1:
            raise ConfigError(f"min_positives must be >= 1, got {self.min_positives}")

    @property
    def smoothing(self) -> bool:
        return self.tune_smoothing or self.smooth_lambda is not None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
