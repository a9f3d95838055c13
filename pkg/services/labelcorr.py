"""
Label Correlation Service
Train-only label co-occurrence matrix, logit-space smoothing along P(k | j),
correlation statistics and smoothing-strength selection
"""

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from data.defaults import LAMBDA_GRID, SPARSITY_CUTOFF
from models import COOC_VARIANTS
from services.errors import ArtifactFormatError, ConfigError, LeakageError, ShapeError
from services.layers import check_binary

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CoocMatrix:
    """Row-normalized conditional co-occurrence P [K x K] built from training labels"""

    P: np.ndarray
    variant: str
    built_from: str
    counts: Optional[np.ndarray] = None
    cutoff: float = SPARSITY_CUTOFF

    @property
    def num_labels(self) -> int:
        return int(self.P.shape[0])

    def sidecar(self) -> Dict[str, Any]:
        return {'variant': self.variant, 'cutoff': self.cutoff, 'train_fingerprint': self.built_from,
                'num_labels': self.num_labels}

    def __repr__(self):
        return f'<CoocMatrix K={self.num_labels} variant={self.variant} from={self.built_from}>'


def labels_fingerprint(labels: np.ndarray, node_ids: Optional[np.ndarray] = None) -> str:
    digest = hashlib.sha256()
    if node_ids is not None:
        digest.update(np.asarray(node_ids, dtype='<u8').tobytes())
    digest.update(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    return digest.hexdigest()[:16]


def build_cooc(train_labels: np.ndarray, variant: str = 'conditional', splits: Optional[Sequence[str]] = None,
               node_ids: Optional[np.ndarray] = None, cutoff: float = SPARSITY_CUTOFF) -> CoocMatrix:
    """
    Co-occurrence matrix from training labels

    Args:
        train_labels: binary [N_tr x K]
        variant: 'conditional' (rows sum to 1) or 'conditional_centered' (rows sum to 0)
        splits: split name of every row; anything other than 'train' is rejected
        node_ids: identities of the rows, folded into the fingerprint
        cutoff: magnitude above which an entry counts as co-occurring

    Returns:
        CoocMatrix
    """
    if variant not in COOC_VARIANTS:
        raise ConfigError(f"variant={variant!r} not in {list(COOC_VARIANTS)}")
    y = np.asarray(train_labels)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ShapeError(f"need a non-empty [N x K] label matrix, got shape {y.shape}")
    check_binary(y)
    if splits is not None:
        splits = np.asarray(splits)
        if splits.shape[0] != y.shape[0]:
            raise ShapeError(f"{splits.shape[0]} split tags for {y.shape[0]} rows")
        leaked = int((splits != 'train').sum())
        if leaked:
            raise LeakageError(f"{leaked} non-training rows passed to the co-occurrence builder")

    y = y.astype(np.int64)
    counts = y.T @ y
    row_sums = counts.sum(axis=1).astype(np.float64)
    supported = np.diag(counts) > 0
    P = np.zeros(counts.shape, dtype=np.float64)
    # C_jk / C_jj followed by row normalization reduces to C_jk / sum_k C_jk
    P[supported] = counts[supported] / row_sums[supported, None]
    if variant == 'conditional_centered':
        P[supported] -= P[supported].mean(axis=1, keepdims=True)
    unsupported = int((~supported).sum())
    if unsupported:
        logger.info(f"{unsupported} labels have no training positives; their rows are zero")
    return CoocMatrix(P=P, variant=variant, built_from=labels_fingerprint(y, node_ids),
                      counts=counts, cutoff=cutoff)


def check_disjoint(train_ids: np.ndarray, *other_ids: np.ndarray) -> None:
    """Fail when any evaluation node also appears among the training rows"""
    train = np.asarray(train_ids)
    for ids in other_ids:
        shared = np.intersect1d(train, np.asarray(ids)).size
        if shared:
            raise LeakageError(f"{shared} evaluation nodes also appear in the training rows")


def smooth_logits(z: np.ndarray, cooc: CoocMatrix, lam: float) -> np.ndarray:
    """
    z'_k = z_k + lam * sum_j z_j P_jk, so evidence for label j spreads to the labels it implies

    Args:
        z: logits [N x K]
        cooc: co-occurrence matrix
        lam: smoothing strength >= 0 (0 returns a copy of z)
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cooc.num_labels:
        raise ShapeError(f"logits {z.shape} vs a {cooc.num_labels}-label co-occurrence matrix")
    if lam == 0:
        return z.copy()
    return z + lam * (z @ cooc.P)


def _stat(values: np.ndarray, fn) -> Optional[float]:
    return float(fn(values)) if values.size else None


def correlation_stats(cooc: CoocMatrix, cutoff: Optional[float] = None) -> Dict[str, Any]:
    """Summary of off-diagonal correlation mass (sparsity, mean/max/min, row/column sums)"""
    cutoff = cooc.cutoff if cutoff is None else cutoff
    P = cooc.P
    k = cooc.num_labels
    off = P[~np.eye(k, dtype=bool)]
    row_sums = P.sum(axis=1)
    col_sums = P.sum(axis=0)
    supported = np.diag(cooc.counts) > 0 if cooc.counts is not None else np.any(P != 0, axis=1)
    return {
        'num_labels': k,
        'variant': cooc.variant,
        'cutoff': cutoff,
        'sparsity': _stat(off, lambda v: np.mean(v > cutoff)),
        'mean_correlation': _stat(off, np.mean),
        'max_correlation': _stat(off, np.max),
        'min_correlation': _stat(off, np.min),
        'mean_outgoing': _stat(row_sums, np.mean),
        'mean_incoming': _stat(col_sums, np.mean),
        'min_row_sum': _stat(row_sums, np.min),
        'max_row_sum': _stat(row_sums, np.max),
        'zero_support_labels': int((~supported).sum()),
    }


def save_cooc(cooc: CoocMatrix, csv_path, sidecar_path) -> None:
    """K x K matrix as CSV (17 significant digits) plus a JSON sidecar"""
    with open(csv_path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        for row in cooc.P:
            writer.writerow([f'{v:.17g}' for v in row])
    Path(sidecar_path).write_text(json.dumps(cooc.sidecar(), indent=2, sort_keys=True) + '\n')


def load_cooc(csv_path, sidecar_path) -> CoocMatrix:
    try:
        with open(csv_path, newline='') as handle:
            P = np.array([[float(v) for v in row] for row in csv.reader(handle)], dtype=np.float64)
        meta = json.loads(Path(sidecar_path).read_text())
    except (OSError, ValueError) as e:
        raise ArtifactFormatError(f"cannot read co-occurrence matrix: {e}")
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ArtifactFormatError(f"co-occurrence matrix is not square: {P.shape}")
    return CoocMatrix(P=P, variant=meta['variant'], built_from=meta['train_fingerprint'],
                      cutoff=meta.get('cutoff', SPARSITY_CUTOFF))


def tune_lambda(score_fn: Callable[[float], float], grid: Sequence[float] = LAMBDA_GRID) -> float:
    """
    Pick the smoothing strength with the highest validation score

    Args:
        score_fn: validation score (higher is better) of one lambda
        grid: candidate values, tried in ascending order

    Returns:
        Best lambda; ties go to the smaller value
    """
    best_lam, best_score = None, -np.inf
    for lam in sorted(grid):
        score = score_fn(lam)
        logger.debug(f"lambda={lam}: validation score {score:.6f}")
        if best_lam is None or score > best_score:
            best_lam, best_score = lam, score
    logger.info(f"Selected lambda={best_lam} (validation score {best_score:.6f})")
    return best_lam
