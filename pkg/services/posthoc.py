"""
Post-hoc Decision Stack
Optional label-correlation smoothing, temperature scaling and per-label
thresholds fitted on a run's validation logits and frozen for test
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.special import expit

from data import defaults
from models import CalibrationConfig
from services.artifacts import LogitsTable, RunDirectory, write_json, write_rows_csv
from services.calibrate import (CalibrationModel, fit_temperature, fit_thresholds, save_calibration,
                                scaled_logits, with_thresholds)
from services.errors import SplitMissingError
from services.labelcorr import (CoocMatrix, build_cooc, check_disjoint, correlation_stats, save_cooc,
                                smooth_logits, tune_lambda)
from services.metrics import EvalTable, brier, ece, mean_auc, micro_f1, nll, reliability_bins

logger = logging.getLogger(__name__)


@dataclass
class PosthocResult:
    """Fitted calibration plus the before/after report"""

    calibration: CalibrationModel
    report: Dict[str, Any]
    reliability: List[Dict[str, Any]]
    cooc: Optional[CoocMatrix] = None


def _fit(z_val: np.ndarray, y_val: np.ndarray, config: CalibrationConfig,
         num_threads: Optional[int]) -> CalibrationModel:
    cal = fit_temperature(EvalTable(z_val, y_val), config.mode, config.l2, num_threads)
    probs = EvalTable(expit(scaled_logits(z_val, cal)), y_val, is_prob=True)
    thresholds = fit_thresholds(probs, config.beta, config.min_positives, num_threads)
    return with_thresholds(cal, thresholds, config.beta, config.bins)


def split_report(raw: np.ndarray, smoothed: np.ndarray, labels: np.ndarray, cal: CalibrationModel,
                 bins: int) -> Dict[str, Any]:
    """Metrics of one split before and after the stack"""
    raw_t = EvalTable(raw, labels)
    raw_p = raw_t.probabilities()
    calibrated_logits = scaled_logits(smoothed, cal)
    cal_p = EvalTable(expit(calibrated_logits), labels, is_prob=True)
    return {
        'n_rows': int(labels.shape[0]),
        'auc_raw': mean_auc(raw_t),
        'auc_smoothed': mean_auc(EvalTable(smoothed, labels)),
        # ranks are compared in logit space, where dividing by T_k is strictly monotone
        'auc_calibrated': mean_auc(EvalTable(calibrated_logits, labels)),
        'micro_f1_05': micro_f1(raw_p, 0.5),
        'micro_f1_05_calibrated': micro_f1(cal_p, 0.5),
        'micro_f1_fitted': micro_f1(cal_p, cal.thresholds),
        'ece_raw': ece(raw_p, bins),
        'ece_calibrated': ece(cal_p, bins),
        'brier_raw': brier(raw_p),
        'brier_calibrated': brier(cal_p),
        'nll_raw': nll(raw_t),
        'nll_calibrated': nll(EvalTable(calibrated_logits, labels)),
    }


def run_posthoc(train: LogitsTable, valid: LogitsTable, test: Optional[LogitsTable],
                config: CalibrationConfig, num_threads: int = None) -> PosthocResult:
    """
    Fit the post-hoc stack on validation and apply it frozen to test

    Order: smooth raw logits, fit temperatures on the smoothed validation
    logits, fit thresholds on the calibrated validation probabilities.

    Args:
        train: training rows (labels feed the co-occurrence matrix only)
        valid: validation rows used for every fit
        test: held-out rows, evaluated only
        config: stack settings
        num_threads: worker cap for per-label fits

    Returns:
        PosthocResult
    """
    z_val = valid.logits.astype(np.float64)
    y_val = valid.labels
    cooc, lam = None, config.smooth_lambda
    if config.smoothing:
        others = [valid.node_id] + ([test.node_id] if test is not None else [])
        check_disjoint(train.node_id, *others)
        cooc = build_cooc(train.labels, config.cooc_variant, node_ids=train.node_id)

    if config.tune_smoothing:
        def score(candidate: float) -> float:
            smoothed = smooth_logits(z_val, cooc, candidate)
            cal = _fit(smoothed, y_val, config, num_threads)
            return micro_f1(EvalTable(expit(scaled_logits(smoothed, cal)), y_val, is_prob=True), cal.thresholds)

        lam = tune_lambda(score)

    def prepare(z: np.ndarray) -> np.ndarray:
        return smooth_logits(z, cooc, lam) if cooc is not None else z

    smoothed_val = prepare(z_val)
    cal = _fit(smoothed_val, y_val, config, num_threads)
    cal = with_thresholds(cal, cal.thresholds, config.beta, config.bins,
                          smooth_lambda=lam if cooc is not None else None,
                          cooc_variant=config.cooc_variant if cooc is not None else None,
                          min_positives=config.min_positives)

    report: Dict[str, Any] = {
        'mode': config.mode,
        'l2': config.l2,
        'beta': config.beta,
        'bins': config.bins,
        'smooth_lambda': lam if cooc is not None else None,
        'tuned_lambda': config.tune_smoothing,
        'temperature': cal.temperature_stats(),
        'valid': split_report(z_val, smoothed_val, y_val, cal, config.bins),
    }
    reliability = [{'split': 'valid', **row} for row in reliability_bins(
        EvalTable(expit(scaled_logits(smoothed_val, cal)), y_val, is_prob=True), config.bins)]
    if test is not None and test.num_rows:
        z_test = test.logits.astype(np.float64)
        smoothed_test = prepare(z_test)
        report['test'] = split_report(z_test, smoothed_test, test.labels, cal, config.bins)
        reliability += [{'split': 'test', **row} for row in reliability_bins(
            EvalTable(expit(scaled_logits(smoothed_test, cal)), test.labels, is_prob=True), config.bins)]
    if cooc is not None:
        report['cooc'] = correlation_stats(cooc)

    valid_doc = report['valid']
    logger.info(f"Validation micro-F1 {valid_doc['micro_f1_05']:.4f}@0.5 -> {valid_doc['micro_f1_fitted']:.4f} "
                f"fitted; ECE {valid_doc['ece_raw']:.4f} -> {valid_doc['ece_calibrated']:.4f}")
    return PosthocResult(calibration=cal, report=report, reliability=reliability, cooc=cooc)


def calibrate_run(run: RunDirectory, config: CalibrationConfig, num_threads: int = None) -> PosthocResult:
    """Run the stack on a run directory and write its post-hoc files"""
    train = run.read_table('train')
    valid = run.read_table('valid')
    try:
        test = run.read_table('test')
    except SplitMissingError:
        logger.warning(f"{run.path} has no test logits; reporting validation only")
        test = None
    result = run_posthoc(train, valid, test, config, num_threads)
    save_calibration(result.calibration, run / defaults.CALIBRATION_FILE)
    write_json(result.report, run / defaults.POSTHOC_FILE)
    write_rows_csv(result.reliability, run / defaults.RELIABILITY_FILE,
                   ['split', 'bin_lower', 'bin_upper', 'count', 'mean_confidence', 'positive_rate'])
    if result.cooc is not None:
        save_cooc(result.cooc, run / defaults.COOC_FILE, run / defaults.COOC_SIDECAR)
    return result
