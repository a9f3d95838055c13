"""
Default Settings
Hyperparameter defaults, synthetic dataset presets and the desk-scale ablation grid
"""

# Edge features
EDGE_DIM = 8
LABELS_FULL = 112

# Architecture
DEFAULT_LAYERS = 3
DEFAULT_HIDDEN = 512
DEFAULT_DROPOUT = 0.1
LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

# Optimization
DEFAULT_LR = 2e-3
DEFAULT_EPOCHS = 120
DEFAULT_PATIENCE = 12
DEFAULT_EVAL_EVERY = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Post-hoc decision stack
ECE_BINS = 15
DEFAULT_BETA = 1.0
DEFAULT_L2 = 1.0
LOG_T_BOUNDS = (-4.0, 4.0)
TEMPERATURE_TOL = 1e-6
LAMBDA_GRID = (0.0, 0.05, 0.1, 0.2)
SPARSITY_CUTOFF = 1e-3

# Environment
NUM_THREADS_ENV = 'ECHL_NUM_THREADS'

# Run directory layout
ARGS_FILE = 'args.json'
METRICS_FILE = 'metrics.json'
PER_SPECIES_FILE = 'per_species.csv'
HISTORY_FILE = 'history.csv'
PER_SPECIES_REPORT_FILE = 'per_species_report.csv'
REPORT_FILE = 'report.csv'
REPORT_PLOT = 'auc_vs_cost.svg'
NODES_FILE = 'nodes.tsv'
EDGES_FILE = 'edges.tsv'
SYNTH_FILE = 'synth.json'
CALIBRATION_FILE = 'calibration.json'
POSTHOC_FILE = 'posthoc_metrics.json'
RELIABILITY_FILE = 'reliability.csv'
COOC_FILE = 'cooc.csv'
COOC_SIDECAR = 'cooc.json'
SPLITS = ('train', 'valid', 'test')


def logits_file(split: str) -> str:
    """File name of the ECHL logits table for a split"""
    return f'logits_{split}.echl'


# Synthetic presets, keyed by name
SYNTH_PRESETS = {
    'tiny': {
        'num_species': 3,
        'nodes_per_species': 40,
        'num_labels': 6,
        'edge_density': 0.08,
        'signal': 0.8,
    },
    'desk': {
        'num_species': 3,
        'nodes_per_species': 500,
        'num_labels': 16,
        'edge_density': 0.01,
        'signal': 0.8,
        'edge_channels': 'label_routed',
    },
    'separable': {
        'num_species': 4,
        'nodes_per_species': 500,
        'num_labels': 8,
        'edge_density': 0.1,
        'signal': 1.0,
        'edge_noise': 0.02,
        'edge_channels': 'label_routed',
    },
}

# Desk-scale aggregation ablation: one entry per configuration, run once per seed
ABLATION_GRID = [
    {'name': 'sage_sum', 'model': 'sage', 'norm': 'ln', 'x_aggr': 'sum', 'edge_scalar': 'sum'},
    {'name': 'sage_mean', 'model': 'sage', 'norm': 'ln', 'x_aggr': 'mean', 'edge_scalar': 'sum'},
    {'name': 'mlp_sum', 'model': 'mlp', 'norm': 'ln', 'x_aggr': 'sum', 'edge_scalar': 'sum'},
]
ABLATION_SEEDS = (1, 2, 3)
ABLATION_HIDDEN = 64
