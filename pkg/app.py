"""
Edge-Aware Node Classification - Command Line Interface
Dataset synthesis, training, evaluation, post-hoc calibration, label
co-occurrence statistics, logits export, seed sweeps and reports
"""

import functools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from data import defaults
from models import CalibrationConfig, ModelConfig, SynthSpec, TrainConfig, AGGR_KINDS, COOC_VARIANTS, \
    EDGE_CHANNEL_MODES, EDGE_SCALARS, MLP_SHAPES, MODEL_KINDS, NORM_KINDS
from services.artifacts import RunDirectory, clean_json, write_json, write_logits_csv
from services.errors import ConfigError, EchlError
from services.graphstore import SPLIT_CODES, generate_synthetic, load_dataset, save_dataset
from services.labelcorr import build_cooc, correlation_stats, save_cooc
from services.parallel import blas_limits, get_num_threads
from services.posthoc import calibrate_run
from services.report import write_report
from services.trainer import evaluate, run_to_directory, train

logger = logging.getLogger(__name__)

SPLIT_NAMES = np.array(defaults.SPLITS)


def handle_errors(fn):
    """Map library errors to exit codes: usage problems 2, runtime failures 1"""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            with blas_limits():
                return fn(*args, **kwargs)
        except ConfigError as e:
            raise click.UsageError(str(e))
        except (EchlError, OSError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(1)
        except click.ClickException:
            raise
        except Exception as e:
            logger.exception(f"Unexpected failure in {fn.__name__}: {e}")
            sys.exit(1)
    return wrapper


def echo_json(doc) -> None:
    click.echo(json.dumps(clean_json(doc), indent=2, sort_keys=True))


def prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def load_data_dir(data_dir: str):
    path = Path(data_dir)
    return load_dataset(path / defaults.NODES_FILE, path / defaults.EDGES_FILE)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log DEBUG messages')
@click.option('--quiet', '-q', is_flag=True, help='Log warnings and errors only')
def cli(verbose, quiet):
    """Edge-aware multi-label node classification"""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(level)


# ================================================
# DATASETS
# ================================================

@cli.command()
@click.option('--preset', type=click.Choice(sorted(defaults.SYNTH_PRESETS)), default=None)
@click.option('--species', type=click.IntRange(min=3), default=None)
@click.option('--nodes-per', type=click.IntRange(min=2), default=None)
@click.option('--labels', type=click.IntRange(min=1), default=None)
@click.option('--density', type=click.FloatRange(0.0, 1.0, min_open=True), default=None)
@click.option('--signal', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--prototype-rate', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--label-noise', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--edge-noise', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--cross-species', type=click.FloatRange(0.0, 1.0), default=None)
@click.option('--edge-channels', type=click.Choice(EDGE_CHANNEL_MODES), default=None)
@click.option('--seed', type=int, default=1, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--force', is_flag=True)
@handle_errors
def synth(preset, species, nodes_per, labels, density, signal, prototype_rate, label_noise, edge_noise,
          cross_species, edge_channels, seed, out_dir, force):
    """Write a synthetic species-split dataset (nodes.tsv, edges.tsv)"""
    doc = dict(defaults.SYNTH_PRESETS.get(preset, {}))
    flags = {'num_species': species, 'nodes_per_species': nodes_per, 'num_labels': labels,
             'edge_density': density, 'signal': signal, 'prototype_rate': prototype_rate,
             'label_noise': label_noise, 'edge_noise': edge_noise, 'cross_species_rate': cross_species,
             'edge_channels': edge_channels}
    doc.update({k: v for k, v in flags.items() if v is not None})
    spec = SynthSpec(**doc)
    out = Path(out_dir)
    prepare_out(out, force)
    g = generate_synthetic(spec, seed)
    save_dataset(g, out / defaults.NODES_FILE, out / defaults.EDGES_FILE)
    write_json({**spec.to_dict(), 'seed': seed, 'preset': preset, **g.summary()}, out / defaults.SYNTH_FILE)
    click.echo(f"Wrote {g.num_nodes} nodes and {g.num_edges} edges to {out}")


@cli.command()
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--variant', type=click.Choice(COOC_VARIANTS), default='conditional', show_default=True)
@click.option('--cutoff', type=float, default=defaults.SPARSITY_CUTOFF, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@handle_errors
def cooc(data_dir, variant, cutoff, out_dir):
    """Training-split label co-occurrence statistics"""
    g = load_data_dir(data_dir)
    train_idx = g.split_index('train')
    matrix = build_cooc(g.labels[train_idx], variant, splits=SPLIT_NAMES[g.split[train_idx]],
                        node_ids=train_idx, cutoff=cutoff)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_cooc(matrix, out / defaults.COOC_FILE, out / defaults.COOC_SIDECAR)
    echo_json(correlation_stats(matrix))


# ================================================
# TRAINING & EVALUATION
# ================================================

def model_options(fn):
    options = [
        click.option('--model', type=click.Choice(MODEL_KINDS), default='sage', show_default=True),
        click.option('--norm', type=click.Choice(NORM_KINDS), default='ln', show_default=True),
        click.option('--x-aggr', type=click.Choice(AGGR_KINDS), default='sum', show_default=True),
        click.option('--edge-scalar', type=click.Choice(EDGE_SCALARS), default='sum', show_default=True),
        click.option('--hid', type=click.IntRange(min=1), default=defaults.DEFAULT_HIDDEN, show_default=True),
        click.option('--layers', type=click.IntRange(min=1), default=defaults.DEFAULT_LAYERS, show_default=True),
        click.option('--dropout', type=click.FloatRange(0.0, 1.0, max_open=True), default=defaults.DEFAULT_DROPOUT,
                     show_default=True),
        click.option('--mlp-shape', type=click.Choice(MLP_SHAPES), default='uniform', show_default=True),
        click.option('--cln-desc-dim', type=click.IntRange(min=1), default=None),
        click.option('--lr', type=click.FloatRange(min=0.0), default=defaults.DEFAULT_LR, show_default=True),
        click.option('--epochs', type=click.IntRange(min=1), default=defaults.DEFAULT_EPOCHS, show_default=True),
        click.option('--patience', type=click.IntRange(min=1), default=defaults.DEFAULT_PATIENCE, show_default=True),
        click.option('--eval-every', type=click.IntRange(min=1), default=defaults.DEFAULT_EVAL_EVERY,
                     show_default=True),
        click.option('--ece-bins', type=click.IntRange(min=1), default=defaults.ECE_BINS, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _model_doc(opts) -> dict:
    return {'model': opts['model'], 'norm': opts['norm'], 'x_aggr': opts['x_aggr'],
            'edge_scalar': opts['edge_scalar'], 'hid': opts['hid'], 'layers': opts['layers'],
            'dropout': opts['dropout'], 'mlp_shape': opts['mlp_shape'], 'cln_desc_dim': opts['cln_desc_dim']}


def _train_doc(opts) -> dict:
    return {k: opts[k] for k in ('lr', 'epochs', 'patience', 'eval_every', 'ece_bins')}


@cli.command('train')
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@model_options
@click.option('--seed', type=int, default=1, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--force', is_flag=True)
@handle_errors
def train_command(data_dir, seed, out_dir, force, **opts):
    """Train one model and write its run directory"""
    run = RunDirectory(out_dir).prepare(force)
    g = load_data_dir(data_dir)
    cfg = ModelConfig.from_dict({**_model_doc(opts), 'num_labels': g.num_labels})
    tcfg = TrainConfig.from_dict({**_train_doc(opts), 'seed': seed, 'out_dir': str(out_dir)})
    artifact = train(g, cfg, tcfg, extra_args={'data': str(data_dir), 'force': force})
    artifact.save(run, force=True)
    metrics = artifact.metrics
    click.echo(f"val_auc={metrics['val_auc']:.4f} test_auc={metrics['test_auc']:.4f} "
               f"params={metrics['params']} -> {run.path}")


@cli.command('eval')
@click.option('--run', 'run_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--split', type=click.Choice(defaults.SPLITS), default='test', show_default=True)
@click.option('--bins', type=click.IntRange(min=1), default=None, help='Defaults to the run\'s ECE bins')
@click.option('--check', is_flag=True, help='Fail unless the numbers match metrics.json')
@handle_errors
def eval_command(run_dir, split, bins, check):
    """Recompute the metrics of one split from its logits file"""
    run = RunDirectory(run_dir)
    stored = run.metrics() if check or bins is None else {}
    doc = evaluate(run, split, bins or stored.get('ece_bins', defaults.ECE_BINS))
    if check:
        prefix = {'train': 'train', 'valid': 'val', 'test': 'test'}[split]
        pairs = {'mean_auc': f'{prefix}_auc', 'micro_f1_05': f'{prefix}_f1_05',
                 'ece': f'{prefix}_ece', 'brier': f'{prefix}_brier'}
        mismatched = [key for key, stored_key in pairs.items()
                      if clean_json(doc[key]) != stored.get(stored_key)]
        if mismatched:
            logger.error(f"{run.path}: recomputed {mismatched} differ from {defaults.METRICS_FILE}")
            sys.exit(1)
        logger.info(f"{run.path}: {split} metrics match {defaults.METRICS_FILE}")
    echo_json(doc)


@cli.command('export-csv')
@click.option('--run', 'run_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--split', 'splits', type=click.Choice(defaults.SPLITS), multiple=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@handle_errors
def export_csv(run_dir, splits, out_dir):
    """Mirror ECHL logits tables as CSV"""
    run = RunDirectory(run_dir)
    out = Path(out_dir) if out_dir else run.path
    out.mkdir(parents=True, exist_ok=True)
    for split in splits or defaults.SPLITS:
        path = out / f'logits_{split}.csv'
        write_logits_csv(run.read_table(split), path)
        click.echo(str(path))


# ================================================
# POST-HOC & REPORTING
# ================================================

@cli.command('calibrate')
@click.option('--run', 'run_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--mode', type=click.Choice(['global', 'per-label']), default='per-label', show_default=True)
@click.option('--l2', type=click.FloatRange(min=0.0), default=defaults.DEFAULT_L2, show_default=True)
@click.option('--beta', type=click.FloatRange(min=0.0, min_open=True), default=defaults.DEFAULT_BETA,
              show_default=True)
@click.option('--bins', type=click.IntRange(min=1), default=defaults.ECE_BINS, show_default=True)
@click.option('--smooth-lambda', default=None, help="Smoothing strength, or 'tune' to pick it on validation")
@click.option('--cooc-variant', type=click.Choice(COOC_VARIANTS), default='conditional_centered',
              show_default=True)
@click.option('--min-positives', type=click.IntRange(min=1), default=1, show_default=True)
@handle_errors
def calibrate_command(run_dir, mode, l2, beta, bins, smooth_lambda, cooc_variant, min_positives):
    """Fit temperatures and thresholds on validation; report test"""
    tune = smooth_lambda == 'tune'
    lam = None
    if smooth_lambda is not None and not tune:
        try:
            lam = float(smooth_lambda)
        except ValueError:
            raise ConfigError(f"--smooth-lambda must be a number or 'tune', got {smooth_lambda!r}")
    config = CalibrationConfig(mode=mode.replace('-', '_'), l2=l2, beta=beta, bins=bins, smooth_lambda=lam,
                               tune_smoothing=tune, cooc_variant=cooc_variant, min_positives=min_positives)
    result = calibrate_run(RunDirectory(run_dir), config, get_num_threads())
    echo_json(result.report)


@cli.command('report')
@click.argument('runs', nargs=-1, type=click.Path(exists=True))
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@handle_errors
def report_command(runs, out_dir):
    """Aggregate run directories into report.csv and an AUC-vs-cost SVG"""
    if not runs:
        raise ConfigError("report needs at least one run directory")
    result = write_report(runs, out_dir)
    for path in result['files']:
        click.echo(path)
    if result['ablation']['ordering_holds'] is not None:
        echo_json({'ablation': result['ablation']})


@cli.command('sweep')
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@model_options
@click.option('--seeds', default=','.join(str(s) for s in defaults.ABLATION_SEEDS), show_default=True)
@click.option('--ablation', is_flag=True, help='Run the aggregation ablation grid instead of one config')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--force', is_flag=True)
@handle_errors
def sweep(data_dir, seeds, ablation, out_dir, force, **opts):
    """Run seeds (and optionally the ablation grid) as isolated concurrent runs, then report"""
    try:
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {seeds!r}")
    if not seed_list:
        raise ConfigError("--seeds is empty")
    root = Path(out_dir)
    prepare_out(root, force)

    base = _model_doc(opts)
    if ablation:
        configs = [(entry['name'], {**base, **{k: v for k, v in entry.items() if k != 'name'},
                                    'hid': defaults.ABLATION_HIDDEN}) for entry in defaults.ABLATION_GRID]
    else:
        configs = [(f"{base['model']}_{base['x_aggr']}", base)]
    jobs = [(data_dir, doc, {**_train_doc(opts), 'seed': seed}, str(root / name / f'seed{seed}'), force)
            for name, doc in configs for seed in seed_list]

    workers = min(get_num_threads(), len(jobs))
    logger.info(f"Running {len(jobs)} runs with {workers} worker processes")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run_to_directory, *zip(*jobs)))
    else:
        done = [run_to_directory(*job) for job in jobs]
    result = write_report(done, root / 'report')
    echo_json({'runs': done, 'report': result['files'], 'ablation': result['ablation']})


if __name__ == '__main__':
    cli()
