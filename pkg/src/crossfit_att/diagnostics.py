"""Fluctuation diagnostics for TMLE.

Two numeric warnings, both computed from intermediate TMLE results:

* the largest absolute fluctuation coefficient across folds (or the single
  pooled coefficient), and
* the mean relative absolute difference (MRAD) between targeted and initial
  outcome-regression predictions, ``mean(|(q_targeted - q_initial) / q_targeted|)``.
  The targeted value is the denominator because the initial regression can be
  exactly zero.

Flags are advisory; nothing here changes an estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

TMLE_KINDS = ("tmle_c", "tmle_w", "tmle_cp", "tmle_wp")


@dataclass(frozen=True)
class DiagnosisReport:
    max_abs_epsilon: float
    epsilon_flag: bool
    mrad: float
    mrad_flag: bool
    concordance_pairs: np.ndarray = field(repr=False)
    epsilon_threshold: float = 10.0
    mrad_threshold: float = 10.0

    @property
    def flagged(self) -> bool:
        return self.epsilon_flag or self.mrad_flag


def compute_mrad(q_pairs) -> float:
    """Mean of ``|(q_targeted - q_initial) / q_targeted|`` over ``(q_initial, q_targeted)`` pairs.

    A pair whose two values are identical contributes zero, including the
    pair ``(0, 0)`` produced when a zero initial regression is not moved.
    Any other pair with ``q_targeted == 0`` raises ``ZeroDivisionError``.
    """
    pairs = np.asarray(q_pairs, dtype=float)
    if pairs.size == 0:
        raise ValueError("compute_mrad needs at least one pair")
    pairs = pairs.reshape(-1, 2)
    q0, q1 = pairs[:, 0], pairs[:, 1]
    same = q0 == q1
    if np.any((q1 == 0.0) & ~same):
        raise ZeroDivisionError("targeted prediction of exactly zero with a nonzero initial prediction")
    ratio = np.zeros_like(q1)
    moved = ~same
    ratio[moved] = np.abs((q1[moved] - q0[moved]) / q1[moved])
    return float(ratio.mean())


def safe_mrad(q_pairs) -> float:
    """:func:`compute_mrad`, with the division-by-zero case reported as ``inf``."""
    try:
        return compute_mrad(q_pairs)
    except ZeroDivisionError:
        return math.inf


def diagnose(report, epsilon_threshold: float = 10.0, mrad_threshold: float = 10.0) -> DiagnosisReport:
    if not report.fluctuations or report.q_pairs is None:
        raise ValueError(f"{report.label}: diagnostics apply to TMLE reports only")
    max_eps = max(abs(rec.epsilon) for rec in report.fluctuations)
    mrad = report.mrad if report.mrad is not None else safe_mrad(report.q_pairs)
    return DiagnosisReport(
        max_abs_epsilon=float(max_eps),
        epsilon_flag=bool(max_eps > epsilon_threshold),
        mrad=float(mrad),
        mrad_flag=bool(mrad > mrad_threshold),
        concordance_pairs=report.q_pairs,
        epsilon_threshold=epsilon_threshold,
        mrad_threshold=mrad_threshold,
    )


CONCORDANCE_COLUMNS = ("observation_index", "fold", "q_initial", "q_targeted", "estimator_kind")


def concordance_rows(report, folds, rep_id=None):
    for i, (q0, q1) in enumerate(report.q_pairs):
        row = [i, int(folds[i]), repr(float(q0)), repr(float(q1)), report.label]
        yield row if rep_id is None else [rep_id, *row]


def write_concordance_csv(path, reports, folds) -> None:
    """One row per observation and TMLE report."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONCORDANCE_COLUMNS)
        for report in reports:
            if report.q_pairs is not None:
                w.writerows(concordance_rows(report, folds))
