"""
Metrics Service
Exact multi-label metrics: per-label ROC-AUC with tie credit, mean AUC,
micro-F1, ECE, Brier, NLL, reliability bins and per-species AUC
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from services.errors import ConfigError, ShapeError
from services.layers import check_binary

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EvalTable:
    """Scores (logits or probabilities) and binary labels, both [N x K]"""

    scores: np.ndarray
    labels: np.ndarray
    is_prob: bool = False

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim == 1:
            scores, labels = scores[:, None], labels.reshape(-1, 1)
        if scores.shape != labels.shape:
            raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
        check_binary(labels)
        if self.is_prob and scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ConfigError("probability scores must lie in [0, 1]")
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'labels', labels.astype(np.uint8))

    @classmethod
    def from_logits(cls, logits, labels) -> 'EvalTable':
        return cls(logits, labels, is_prob=False)

    def probabilities(self) -> 'EvalTable':
        """Same table with sigmoid applied when scores are logits"""
        if self.is_prob:
            return self
        return EvalTable(expit(self.scores), self.labels, is_prob=True)

    def rows(self, index: np.ndarray) -> 'EvalTable':
        return EvalTable(self.scores[index], self.labels[index], self.is_prob)

    @property
    def num_rows(self) -> int:
        return int(self.scores.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.scores.shape[1])


# ================================================
# RANKING
# ================================================

def roc_auc_per_label(t: EvalTable) -> np.ndarray:
    """
    Per-label ROC-AUC from midranks (Mann-Whitney with half credit for ties)

    Labels without both classes are NaN.

    Returns:
        array [K]
    """
    auc = np.full(t.num_labels, np.nan)
    if t.num_rows == 0:
        return auc
    positives = t.labels.sum(axis=0).astype(np.float64)
    negatives = t.num_rows - positives
    defined = (positives > 0) & (negatives > 0)
    if not defined.any():
        return auc
    ranks = rankdata(t.scores[:, defined], axis=0)
    pos = positives[defined]
    rank_sum = (ranks * t.labels[:, defined]).sum(axis=0)
    auc[defined] = (rank_sum - pos * (pos + 1) / 2.0) / (pos * negatives[defined])
    return auc


def mean_auc(t: EvalTable) -> float:
    """Mean AUC over labels with both classes; NaN if there are none"""
    auc = roc_auc_per_label(t)
    defined = ~np.isnan(auc)
    skipped = int((~defined).sum())
    if skipped:
        logger.debug(f"{skipped} of {auc.size} labels have an undefined AUC and are skipped")
    if not defined.any():
        logger.warning("No label has both classes; mean AUC is undefined")
        return float('nan')
    return float(auc[defined].mean())


def per_species_auc(t: EvalTable, species_id: np.ndarray) -> Dict[int, float]:
    """Mean AUC of each species' rows, keyed by species id (ascending)"""
    species_id = np.asarray(species_id)
    if species_id.shape[0] != t.num_rows:
        raise ShapeError(f"{species_id.shape[0]} species ids for {t.num_rows} rows")
    return {int(s): mean_auc(t.rows(species_id == s)) for s in np.unique(species_id)}


# ================================================
# THRESHOLDED
# ================================================

def predictions(t: EvalTable, thresholds: Union[float, Sequence[float], np.ndarray]) -> np.ndarray:
    """Binary predictions scores >= threshold (scalar or per label)"""
    tau = np.asarray(thresholds, dtype=np.float64)
    if tau.ndim == 1 and tau.size != t.num_labels:
        raise ShapeError(f"{tau.size} thresholds for {t.num_labels} labels")
    if t.is_prob and tau.size and (tau.min() < 0.0 or tau.max() > 1.0):
        raise ConfigError("thresholds must lie in [0, 1] for probability scores")
    return (t.scores >= tau).astype(np.uint8)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def micro_f1(t: EvalTable, thresholds: Union[float, Sequence[float], np.ndarray] = 0.5) -> float:
    """
    Micro-F1 pooled over all (node, label) pairs

    Args:
        t: table (probabilities when thresholds are probabilities)
        thresholds: scalar or per-label cutoffs

    Returns:
        2TP / (2TP + FP + FN), or 1.0 when all three counts are zero
    """
    pred = predictions(t, thresholds).astype(bool)
    truth = t.labels.astype(bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return f1_from_counts(tp, fp, fn)


# ================================================
# CALIBRATION
# ================================================

def _require_prob(t: EvalTable) -> None:
    if not t.is_prob:
        raise ConfigError("this metric needs probability scores")


def _bin_index(p: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((p * bins).astype(np.int64), bins - 1)


def ece(t: EvalTable, bins: int = 15) -> float:
    """Expected calibration error with equal-width bins over all pooled pairs"""
    _require_prob(t)
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    p = t.scores.reshape(-1)
    y = t.labels.reshape(-1).astype(np.float64)
    if p.size == 0:
        return float('nan')
    index = _bin_index(p, bins)
    counts = np.bincount(index, minlength=bins)
    conf = np.bincount(index, weights=p, minlength=bins)
    acc = np.bincount(index, weights=y, minlength=bins)
    occupied = counts > 0
    gaps = np.abs(acc[occupied] - conf[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] / p.size * gaps))


def reliability_bins(t: EvalTable, bins: int = 15) -> List[Dict[str, float]]:
    """Reliability-diagram rows: bin edges, count, mean confidence, positive rate"""
    _require_prob(t)
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    p = t.scores.reshape(-1)
    y = t.labels.reshape(-1).astype(np.float64)
    index = _bin_index(p, bins)
    counts = np.bincount(index, minlength=bins)
    conf = np.bincount(index, weights=p, minlength=bins)
    acc = np.bincount(index, weights=y, minlength=bins)
    rows = []
    for b in range(bins):
        n = int(counts[b])
        rows.append({
            'bin_lower': b / bins,
            'bin_upper': (b + 1) / bins,
            'count': n,
            'mean_confidence': float(conf[b] / n) if n else float('nan'),
            'positive_rate': float(acc[b] / n) if n else float('nan'),
        })
    return rows


def brier(t: EvalTable) -> float:
    _require_prob(t)
    if t.scores.size == 0:
        return float('nan')
    return float(np.mean((t.scores - t.labels) ** 2))


def nll(t: EvalTable) -> float:
    """Mean binary cross-entropy; logits are used directly when available"""
    if t.scores.size == 0:
        return float('nan')
    y = t.labels.astype(np.float64)
    if not t.is_prob:
        return float(np.mean(np.logaddexp(0.0, t.scores) - y * t.scores))
    p = np.clip(t.scores, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def summarize(t: EvalTable, bins: int = 15) -> Dict[str, float]:
    """Mean AUC, micro-F1@0.5, ECE, Brier and NLL of one table"""
    probs = t.probabilities()
    return {
        'mean_auc': mean_auc(t),
        'micro_f1_05': micro_f1(probs, 0.5),
        'ece': ece(probs, bins),
        'brier': brier(probs),
        'nll': nll(t),
    }
