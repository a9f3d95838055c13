"""
Calibration Service
Post-hoc temperature scaling (global, or per label pulled toward the global
value) and per-label F-beta thresholds, fitted on validation and frozen for test
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from data.defaults import DEFAULT_BETA, DEFAULT_L2, ECE_BINS, LOG_T_BOUNDS, TEMPERATURE_TOL
from models import CALIBRATION_MODES
from services.errors import ArtifactFormatError, ConfigError, ShapeError
from services.metrics import EvalTable
from services.parallel import map_ordered

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CalibrationModel:
    """Fitted temperatures and thresholds; immutable once fitted"""

    mode: str
    t_global: float
    temps: np.ndarray
    thresholds: Optional[np.ndarray] = None
    beta: float = DEFAULT_BETA
    l2: float = DEFAULT_L2
    bins: int = ECE_BINS
    extras: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in CALIBRATION_MODES:
            raise ConfigError(f"mode={self.mode!r} not in {list(CALIBRATION_MODES)}")
        temps = np.asarray(self.temps, dtype=np.float64)
        if self.t_global <= 0 or np.any(temps <= 0):
            raise ConfigError("temperatures must be positive")
        object.__setattr__(self, 'temps', temps)
        if self.thresholds is not None:
            tau = np.asarray(self.thresholds, dtype=np.float64)
            if tau.shape != temps.shape:
                raise ShapeError(f"{tau.size} thresholds for {temps.size} labels")
            if tau.size and (tau.min() < 0 or tau.max() > 1):
                raise ConfigError("thresholds must lie in [0, 1]")
            object.__setattr__(self, 'thresholds', tau)

    @property
    def num_labels(self) -> int:
        return int(self.temps.size)

    def temperature_stats(self) -> Dict[str, float]:
        return {
            't_global': float(self.t_global),
            't_mean': float(self.temps.mean()),
            't_min': float(self.temps.min()),
            't_max': float(self.temps.max()),
        }

    def to_dict(self) -> Dict[str, Any]:
        doc = {
            'mode': self.mode,
            't_global': float(self.t_global),
            'temps': [float(t) for t in self.temps],
            'thresholds': None if self.thresholds is None else [float(t) for t in self.thresholds],
            'beta': self.beta,
            'l2': self.l2,
            'bins': self.bins,
        }
        doc.update(self.extras)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> 'CalibrationModel':
        known = {'mode', 't_global', 'temps', 'thresholds', 'beta', 'l2', 'bins'}
        try:
            return cls(
                mode=doc['mode'],
                t_global=doc['t_global'],
                temps=np.asarray(doc['temps'], dtype=np.float64),
                thresholds=None if doc.get('thresholds') is None else np.asarray(doc['thresholds']),
                beta=doc.get('beta', DEFAULT_BETA),
                l2=doc.get('l2', DEFAULT_L2),
                bins=doc.get('bins', ECE_BINS),
                extras={k: v for k, v in doc.items() if k not in known},
            )
        except KeyError as e:
            raise ArtifactFormatError(f"calibration document lacks {e}")


def save_calibration(cal: CalibrationModel, path) -> None:
    Path(path).write_text(json.dumps(cal.to_dict(), indent=2, sort_keys=True) + '\n')


def load_calibration(path) -> CalibrationModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactFormatError(f"cannot read calibration from {path}: {e}")
    return CalibrationModel.from_dict(doc)


# ================================================
# TEMPERATURE SCALING
# ================================================

def _mean_nll(z: np.ndarray, y: np.ndarray, temperature: float) -> float:
    scaled = z / temperature
    return float(np.mean(np.logaddexp(0.0, scaled) - y * scaled))


def _minimize_log_t(objective) -> float:
    result = minimize_scalar(objective, method='bounded', bounds=LOG_T_BOUNDS,
                             options={'xatol': TEMPERATURE_TOL})
    return float(np.exp(result.x))


def fit_global_temperature(z: np.ndarray, y: np.ndarray) -> float:
    """Single T minimizing mean NLL of z / T over all pairs"""
    if z.size == 0:
        logger.warning("No validation pairs; global temperature left at 1")
        return 1.0
    return _minimize_log_t(lambda t: _mean_nll(z, y, np.exp(t)))


def fit_temperature(val: EvalTable, mode: str = 'per_label', l2: float = DEFAULT_L2,
                    num_threads: int = None) -> CalibrationModel:
    """
    Fit temperatures on validation logits by NLL minimization over t = log T

    Per-label mode fits the global temperature first, then each label
    independently minimizes mean NLL_k(z_k / T_k) + l2 * (T_k - T_global)^2.

    Args:
        val: validation logits and labels
        mode: 'global' or 'per_label'
        l2: pull strength toward the global temperature (per label)
        num_threads: worker cap for per-label fits

    Returns:
        CalibrationModel without thresholds
    """
    if val.is_prob:
        raise ConfigError("fit_temperature needs logits, got probabilities")
    if mode not in CALIBRATION_MODES:
        raise ConfigError(f"mode={mode!r} not in {list(CALIBRATION_MODES)}")
    if l2 < 0:
        raise ConfigError(f"l2 must be >= 0, got {l2}")
    z = val.scores
    y = val.labels.astype(np.float64)
    t_global = fit_global_temperature(z, y)
    logger.info(f"Global temperature {t_global:.4f} over {z.size} validation pairs")
    if mode == 'global':
        return CalibrationModel(mode, t_global, np.full(val.num_labels, t_global), l2=l2)
    if math.isinf(l2):
        logger.info("Infinite l2 pins every label to the global temperature")
        return CalibrationModel(mode, t_global, np.full(val.num_labels, t_global), l2=l2)

    def fit_label(k: int) -> float:
        column, target = z[:, k], y[:, k]
        if column.size == 0 or target.min() == target.max():
            logger.debug(f"Label {k} has a constant column; using the global temperature")
            return t_global

        def objective(t):
            temperature = np.exp(t)
            return _mean_nll(column, target, temperature) + l2 * (temperature - t_global) ** 2

        return _minimize_log_t(objective)

    temps = np.array(map_ordered(fit_label, range(val.num_labels), num_threads))
    logger.info(f"Per-label temperatures in [{temps.min():.4f}, {temps.max():.4f}]")
    return CalibrationModel(mode, t_global, temps, l2=l2)


def apply_temperature(z: np.ndarray, cal: CalibrationModel) -> np.ndarray:
    """Probabilities sigmoid(z / T_k)"""
    return expit(scaled_logits(z, cal))


def scaled_logits(z: np.ndarray, cal: CalibrationModel) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cal.num_labels:
        raise ShapeError(f"logits {z.shape} vs {cal.num_labels} calibrated labels")
    return z / cal.temps[None, :]


# ================================================
# THRESHOLDS
# ================================================

def fbeta_scan(probs: np.ndarray, labels: np.ndarray, beta: float):
    """
    F-beta of every distinct score used as a cutoff (predict p >= cutoff)

    Returns:
        (candidates ascending, fbeta per candidate)
    """
    candidates = np.unique(probs)
    positive_scores = np.sort(probs[labels == 1])
    negative_scores = np.sort(probs[labels == 0])
    tp = positive_scores.size - np.searchsorted(positive_scores, candidates, side='left')
    fp = negative_scores.size - np.searchsorted(negative_scores, candidates, side='left')
    fn = positive_scores.size - tp
    b2 = beta * beta
    denom = (1.0 + b2) * tp + b2 * fn + fp
    fbeta = np.where(denom > 0, (1.0 + b2) * tp / np.maximum(denom, 1), 0.0)
    return candidates, fbeta


def youden_threshold(probs: np.ndarray, labels: np.ndarray) -> float:
    """Cutoff maximizing TPR - FPR (lowest on ties)"""
    candidates = np.unique(probs)
    positives = np.sort(probs[labels == 1])
    negatives = np.sort(probs[labels == 0])
    tpr = (positives.size - np.searchsorted(positives, candidates, side='left')) / positives.size
    fpr = (negatives.size - np.searchsorted(negatives, candidates, side='left')) / negatives.size
    return float(candidates[int(np.argmax(tpr - fpr))])


def fit_label_threshold(probs: np.ndarray, labels: np.ndarray, beta: float = DEFAULT_BETA,
                        min_positives: int = 1) -> float:
    """
    Threshold of one label

    The F-beta maximizer over distinct validation probabilities (lowest on
    ties). Labels with fewer than min_positives positives fall back to the
    Youden-J cutoff when both classes are present, otherwise to 0.5.
    """
    positives = int(labels.sum())
    negatives = int(labels.size - positives)
    if positives < max(min_positives, 1):
        if positives > 0 and negatives > 0:
            return youden_threshold(probs, labels)
        return 0.5
    candidates, fbeta = fbeta_scan(probs, labels, beta)
    return float(candidates[int(np.argmax(fbeta))])


def fit_thresholds(val_probs: EvalTable, beta: float = DEFAULT_BETA, min_positives: int = 1,
                   num_threads: int = None) -> np.ndarray:
    """
    Per-label thresholds maximizing F-beta on validation probabilities

    Args:
        val_probs: calibrated validation probabilities and labels
        beta: F-beta weight of recall
        min_positives: labels with fewer positives use the fallback cascade
        num_threads: worker cap for per-label scans

    Returns:
        thresholds [K] in [0, 1]
    """
    if not val_probs.is_prob:
        raise ConfigError("fit_thresholds needs probabilities")
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    probs, labels = val_probs.scores, val_probs.labels

    def fit(k: int) -> float:
        return fit_label_threshold(probs[:, k], labels[:, k], beta, min_positives)

    thresholds = np.array(map_ordered(fit, range(val_probs.num_labels), num_threads), dtype=np.float64)
    fallback = int((labels.sum(axis=0) < max(min_positives, 1)).sum())
    if fallback:
        logger.warning(f"{fallback} labels lack validation positives; thresholds use the fallback")
    return thresholds


def with_thresholds(cal: CalibrationModel, thresholds: np.ndarray, beta: float, bins: int = ECE_BINS,
                    **extras) -> CalibrationModel:
    """Calibration model completed with thresholds (and report settings)"""
    return replace(cal, thresholds=thresholds, beta=beta, bins=bins, extras={**cal.extras, **extras})


def decide(test_probs: np.ndarray, cal: CalibrationModel) -> np.ndarray:
    """Binary predictions p >= tau_k with frozen thresholds"""
    if cal.thresholds is None:
        raise ConfigError("calibration has no thresholds fitted")
    probs = np.asarray(test_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != cal.num_labels:
        raise ShapeError(f"probabilities {probs.shape} vs {cal.num_labels} thresholds")
    return (probs >= cal.thresholds[None, :]).astype(np.uint8)
