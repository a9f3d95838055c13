"""
Report Service
Aggregates run directories across seeds into a tidy CSV, a per-species
summary and a static AUC-vs-cost SVG scatter
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from data import defaults
from services.artifacts import RunDirectory, read_rows_csv, write_rows_csv
from services.errors import ArtifactFormatError, ConfigError

logger = logging.getLogger(__name__)

CONFIG_KEYS = ('model', 'norm', 'x_aggr', 'edge_scalar', 'hid', 'layers', 'dropout', 'mlp_shape',
               'lr', 'epochs', 'patience', 'data', 'dataset_fingerprint')
REPORT_METRICS = ('val_auc', 'test_auc', 'val_f1_05', 'test_f1_05', 'ece', 'brier')


def find_runs(paths: Iterable) -> List[RunDirectory]:
    """Run directories among paths (searched recursively for args.json)"""
    runs = []
    for path in paths:
        path = Path(path)
        if (path / defaults.ARGS_FILE).is_file():
            runs.append(RunDirectory(path))
        elif path.is_dir():
            runs.extend(RunDirectory(p.parent) for p in sorted(path.rglob(defaults.ARGS_FILE)))
    return runs


def config_name(args: Dict[str, Any]) -> str:
    return (f"{args.get('model')}/{args.get('norm')}/{args.get('x_aggr')}/{args.get('edge_scalar')}"
            f"/h{args.get('hid')}/L{args.get('layers')}")


def _mean_sd(values: Sequence[Optional[float]]):
    finite = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    if finite.size == 0:
        return None, None
    sd = float(finite.std(ddof=1)) if finite.size > 1 else None
    return float(finite.mean()), sd


def aggregate_runs(runs: Sequence[RunDirectory]) -> List[Dict[str, Any]]:
    """
    One row per configuration with mean and sample sd over its seeds

    Args:
        runs: run directories; runs that differ only in seed are pooled

    Returns:
        Report rows sorted by configuration name
    """
    if not runs:
        raise ConfigError("no run directories to report on")
    groups: Dict[tuple, List[tuple]] = {}
    for run in runs:
        try:
            args, metrics = run.args(), run.metrics()
        except ArtifactFormatError as e:
            logger.warning(f"Skipping {run.path}: {e}")
            continue
        key = tuple((k, str(args.get(k))) for k in CONFIG_KEYS)
        groups.setdefault(key, []).append((args, metrics))
    if not groups:
        raise ConfigError("none of the given directories holds a readable run")

    rows = []
    for members in groups.values():
        args = members[0][0]
        row = {'config': config_name(args)}
        row.update({k: args.get(k) for k in ('model', 'norm', 'x_aggr', 'edge_scalar', 'hid', 'layers')})
        row['n_seeds'] = len(members)
        row['seeds'] = ' '.join(str(a.get('seed')) for a, _ in sorted(members, key=lambda m: m[0].get('seed', 0)))
        for metric in REPORT_METRICS:
            row[f'{metric}_mean'], row[f'{metric}_sd'] = _mean_sd([m.get(metric) for _, m in members])
        row['wall_clock_s_mean'], row['wall_clock_s_sd'] = _mean_sd([m.get('wall_clock_s') for _, m in members])
        row['params'] = members[0][1].get('params')
        rows.append(row)
    return sorted(rows, key=lambda r: r['config'])


def aggregate_species(runs: Sequence[RunDirectory]) -> List[Dict[str, Any]]:
    """Per (configuration, split, species) mean and sd of per-species AUC across seeds"""
    pooled: Dict[tuple, List[Optional[float]]] = {}
    for run in runs:
        path = run / defaults.PER_SPECIES_FILE
        if not path.is_file():
            continue
        name = config_name(run.args())
        for row in read_rows_csv(path):
            value = float(row['mean_auc']) if row['mean_auc'] else None
            pooled.setdefault((name, row['split'], int(row['species_id'])), []).append(value)
    rows = []
    for (name, split, species), values in sorted(pooled.items()):
        mean, sd = _mean_sd(values)
        rows.append({'config': name, 'split': split, 'species_id': species,
                     'mean_auc_mean': mean, 'mean_auc_sd': sd, 'n_runs': len(values)})
    return rows


def plot_auc_vs_cost(rows: Sequence[Dict[str, Any]], path) -> None:
    """Static SVG: test AUC against wall-clock, marker area proportional to parameters"""
    fig, ax = plt.subplots(figsize=(6, 4))
    params = np.array([r.get('params') or 0 for r in rows], dtype=np.float64)
    sizes = 20 + 300 * params / params.max() if params.size and params.max() > 0 else np.full(len(rows), 40)
    for row, size in zip(rows, sizes):
        if row.get('test_auc_mean') is None or row.get('wall_clock_s_mean') is None:
            continue
        ax.scatter(row['wall_clock_s_mean'], row['test_auc_mean'], s=size, alpha=0.7, label=row['config'])
    ax.set_xlabel('wall-clock seconds (mean over seeds)')
    ax.set_ylabel('test mean ROC-AUC')
    if rows:
        ax.legend(fontsize=6, loc='best')
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def ablation_check(rows: Sequence[Dict[str, Any]], margin: float = 0.005) -> Dict[str, Any]:
    """
    Soft ordering check of the aggregation ablation on validation AUC

    sage with x_aggr=sum should reach sage/mean minus margin, and both sage
    variants should beat the MLP on the same features.
    """
    def find(model: str, aggr: str) -> Optional[float]:
        for row in rows:
            if row.get('model') == model and row.get('x_aggr') == aggr:
                return row.get('val_auc_mean')
        return None

    sage_sum, sage_mean, mlp_sum = find('sage', 'sum'), find('sage', 'mean'), find('mlp', 'sum')
    doc = {'sage_sum': sage_sum, 'sage_mean': sage_mean, 'mlp_sum': mlp_sum, 'margin': margin}
    if None in (sage_sum, sage_mean, mlp_sum):
        doc['ordering_holds'] = None
        return doc
    doc['ordering_holds'] = bool(sage_sum >= sage_mean - margin and min(sage_sum, sage_mean) > mlp_sum)
    if not doc['ordering_holds']:
        logger.warning(f"Ablation ordering inverted: {doc}")
    return doc


def write_report(paths: Iterable, out_dir) -> Dict[str, Any]:
    """
    Aggregate runs under paths and write report.csv, per_species_report.csv and the SVG

    Returns:
        {'rows': report rows, 'ablation': ordering check, 'files': written paths}
    """
    runs = find_runs(paths)
    rows = aggregate_runs(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ['config', 'model', 'norm', 'x_aggr', 'edge_scalar', 'hid', 'layers', 'n_seeds', 'seeds']
    for metric in REPORT_METRICS + ('wall_clock_s',):
        columns += [f'{metric}_mean', f'{metric}_sd']
    columns.append('params')
    write_rows_csv(rows, out / defaults.REPORT_FILE, columns)
    write_rows_csv(aggregate_species(runs), out / defaults.PER_SPECIES_REPORT_FILE,
                   ['config', 'split', 'species_id', 'mean_auc_mean', 'mean_auc_sd', 'n_runs'])
    plot_auc_vs_cost(rows, out / defaults.REPORT_PLOT)
    logger.info(f"Reported {len(runs)} runs in {len(rows)} configurations to {out}")
    files = [str(out / name) for name in (defaults.REPORT_FILE, defaults.PER_SPECIES_REPORT_FILE, defaults.REPORT_PLOT)]
    return {'rows': rows, 'ablation': ablation_check(rows), 'files': files}
