"""
Training Service
Full-batch training with early stopping on validation mean AUC, run
documents and logits export from the best snapshot
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from data import defaults
from models import ModelConfig, TrainConfig
from services import layers as nn
from services.artifacts import LogitsTable, RunDirectory, write_json, write_rows_csv
from services.autodiff import ParamStore, Tape, adam_step
from services.cache import FeatureCache, get_feature_cache
from services.errors import ConfigError, NumericalError, SplitMissingError, TrainingDivergedError
from services.graphstore import GraphDataset, load_dataset
from services.metrics import EvalTable, mean_auc, per_species_auc, summarize
from services.networks import ForwardInputs, count_parameters, forward, init_params

logger = logging.getLogger(__name__)


@dataclass
class RunArtifact:
    """Result of one training run"""

    args: Dict[str, Any]
    metrics: Dict[str, Any]
    tables: Dict[str, LogitsTable]
    history: List[Dict[str, Any]] = field(default_factory=list)
    params: Optional[ParamStore] = None

    def per_species_rows(self, bins: int = defaults.ECE_BINS) -> List[Dict[str, Any]]:
        rows = []
        for split in defaults.SPLITS:
            if split not in self.tables:
                continue
            table = self.tables[split]
            doc = evaluate(table, split, bins)
            species_ids, species_counts = np.unique(table.species_id, return_counts=True)
            counts = {int(s): int(c) for s, c in zip(species_ids, species_counts)}
            for species, auc in doc['per_species'].items():
                rows.append({'split': split, 'species_id': species, 'mean_auc': auc,
                             'n_rows': counts[int(species)]})
        return rows

    def save(self, run_dir: Union[str, Path, RunDirectory], force: bool = False) -> RunDirectory:
        """Write every run file into a (new or forced) run directory"""
        run = run_dir if isinstance(run_dir, RunDirectory) else RunDirectory(run_dir)
        run.prepare(force)
        write_json(self.args, run / defaults.ARGS_FILE)
        write_json(self.metrics, run / defaults.METRICS_FILE)
        for split, table in self.tables.items():
            run.write_table(split, table)
        write_rows_csv(self.per_species_rows(self.metrics.get('ece_bins', defaults.ECE_BINS)),
                       run / defaults.PER_SPECIES_FILE, ['split', 'species_id', 'mean_auc', 'n_rows'])
        write_rows_csv(self.history, run / defaults.HISTORY_FILE, ['epoch', 'train_loss', 'val_auc'])
        logger.info(f"Saved run artifacts to {run.path}")
        return run


def _table_for(g: GraphDataset, logits: np.ndarray, index: np.ndarray) -> LogitsTable:
    return LogitsTable(node_id=index, species_id=g.species_id[index],
                       logits=logits[index].astype(np.float32), labels=g.labels[index])


def _f32_auc(logits: np.ndarray, labels: np.ndarray) -> float:
    # selection uses the same precision as the exported tables
    return mean_auc(EvalTable(logits.astype(np.float32).astype(np.float64), labels))


def evaluate(source: Union[LogitsTable, RunArtifact, RunDirectory, str, Path], split: str = 'valid',
             bins: int = defaults.ECE_BINS) -> Dict[str, Any]:
    """
    Metrics document of one split

    Args:
        source: a logits table, an in-memory run, or a run directory
        split: split name (ignored for a bare table)
        bins: ECE bins

    Returns:
        {split, n_rows, mean_auc, micro_f1_05, ece, brier, nll, per_species}
    """
    if isinstance(source, LogitsTable):
        table = source
    elif isinstance(source, RunArtifact):
        if split not in source.tables:
            raise SplitMissingError(f"run has no logits for split {split!r}")
        table = source.tables[split]
    else:
        run = source if isinstance(source, RunDirectory) else RunDirectory(source)
        table = run.read_table(split)
    t = EvalTable(table.logits.astype(np.float64), table.labels)
    doc = {'split': split, 'n_rows': table.num_rows}
    doc.update(summarize(t, bins))
    doc['per_species'] = per_species_auc(t, table.species_id) if table.num_rows else {}
    return doc


class Trainer:
    """Runs one full-batch training job"""

    def __init__(self, cache: Optional[FeatureCache] = None):
        self.cache = cache or get_feature_cache()

    def train(self, g: GraphDataset, cfg: ModelConfig, tcfg: TrainConfig,
              extra_args: Optional[Dict[str, Any]] = None) -> RunArtifact:
        """
        Train with Adam on BCE over training rows and export the best snapshot

        Args:
            g: dataset
            cfg: architecture (num_labels must equal the dataset's)
            tcfg: optimization settings
            extra_args: additional entries for args.json (e.g. dataset path)

        Returns:
            RunArtifact
        """
        if cfg.num_labels != g.num_labels:
            raise ConfigError(f"model has {cfg.num_labels} labels, dataset has {g.num_labels}")
        train_idx = g.split_index('train')
        valid_idx = g.split_index('valid')
        if train_idx.size == 0 or valid_idx.size == 0:
            raise ConfigError("training needs non-empty train and valid splits")

        started = time.perf_counter()
        features = self.cache.features(g, cfg.x_aggr)
        inputs = ForwardInputs.from_graph(g, features, bn_rows=train_idx)
        init_seq, dropout_seq = np.random.SeedSequence(tcfg.seed).spawn(2)
        params = init_params(cfg, features.x.shape[1], np.random.default_rng(init_seq))
        dropout_rng = np.random.default_rng(dropout_seq)
        y_train = g.labels[train_idx].astype(np.float64)
        logger.info(f"Training {cfg!r} ({params.num_parameters()} parameters) on {g!r}")

        best_auc, best_epoch, best_state = -np.inf, 0, params.snapshot()
        bad_evals, evaluations, last_loss, last_auc = 0, 0, float('nan'), float('nan')
        history: List[Dict[str, Any]] = []
        epoch = 0
        for epoch in range(1, tcfg.epochs + 1):
            params.zero_grad()
            try:
                with Tape() as tape:
                    logits = forward(inputs, cfg, params, nn.TRAIN, dropout_rng)
                    loss = nn.bce_with_logits(nn.take_rows(logits, train_idx), y_train)
                tape.backward(loss)
            except NumericalError as e:
                raise TrainingDivergedError(f"epoch {epoch}: {e}")
            last_loss = loss.item()
            adam_step(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
            row = {'epoch': epoch, 'train_loss': last_loss, 'val_auc': None}

            if epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs:
                evaluations += 1
                try:
                    eval_logits = forward(inputs, cfg, params, nn.EVAL).data
                except NumericalError as e:
                    raise TrainingDivergedError(f"epoch {epoch} (evaluation): {e}")
                last_auc = _f32_auc(eval_logits[valid_idx], g.labels[valid_idx])
                row['val_auc'] = last_auc
                if last_auc > best_auc:
                    best_auc, best_epoch, best_state, bad_evals = last_auc, epoch, params.snapshot(), 0
                else:
                    bad_evals += 1
                logger.debug(f"epoch {epoch}: loss={last_loss:.5f} val_auc={last_auc:.5f} bad={bad_evals}")
            history.append(row)
            if bad_evals >= tcfg.patience:
                logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                break

        params.restore(best_state)
        logits = forward(inputs, cfg, params, nn.EVAL).data
        tables = {split: _table_for(g, logits, g.split_index(split)) for split in defaults.SPLITS}
        wall_clock = time.perf_counter() - started

        args = {**cfg.to_dict(), **tcfg.to_dict(), 'dataset_fingerprint': g.fingerprint}
        args.update(extra_args or {})
        metrics = {
            'params': count_parameters(cfg, features.x.shape[1]),
            'wall_clock_s': wall_clock,
            'best_epoch': best_epoch,
            'epochs_run': epoch,
            'evaluations': evaluations,
            'stopped_early': bad_evals >= tcfg.patience,
            'final_train_loss': last_loss,
            'final_val_auc': last_auc,
            'best_val_auc': best_auc,
            'ece_bins': tcfg.ece_bins,
        }
        for split, prefix in (('train', 'train'), ('valid', 'val'), ('test', 'test')):
            doc = evaluate(tables[split], split, tcfg.ece_bins)
            metrics[f'{prefix}_auc'] = doc['mean_auc']
            metrics[f'{prefix}_f1_05'] = doc['micro_f1_05']
            metrics[f'{prefix}_ece'] = doc['ece']
            metrics[f'{prefix}_brier'] = doc['brier']
            metrics[f'{prefix}_nll'] = doc['nll']
        metrics['ece'] = metrics['test_ece']
        metrics['brier'] = metrics['test_brier']
        logger.info(f"Finished in {wall_clock:.1f}s: val_auc={metrics['val_auc']:.4f} "
                    f"test_auc={metrics['test_auc']:.4f} (best epoch {best_epoch})")
        return RunArtifact(args=args, metrics=metrics, tables=tables, history=history, params=params)


def train(g: GraphDataset, cfg: ModelConfig, tcfg: TrainConfig, **kwargs) -> RunArtifact:
    """Train one model with the process-wide feature cache"""
    return Trainer().train(g, cfg, tcfg, **kwargs)


def run_to_directory(data_dir: str, model_doc: Dict[str, Any], train_doc: Dict[str, Any],
                     out_dir: str, force: bool = False) -> str:
    """
    Load a dataset directory, train and save; top-level so process pools can pickle it

    Returns:
        The run directory path
    """
    data_path = Path(data_dir)
    g = load_dataset(data_path / defaults.NODES_FILE, data_path / defaults.EDGES_FILE)
    cfg = ModelConfig.from_dict({**model_doc, 'num_labels': g.num_labels})
    tcfg = TrainConfig.from_dict({**train_doc, 'out_dir': str(out_dir)})
    artifact = train(g, cfg, tcfg, extra_args={'data': str(data_dir)})
    artifact.save(out_dir, force=force)
    return str(out_dir)
