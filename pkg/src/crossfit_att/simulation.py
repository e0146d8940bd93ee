"""Rare-outcome data-generating process, its true parameter and a Monte Carlo engine.

The DGP draws three covariates uniformly on ``[-1, 1]``, a treatment with a
weak logistic dependence on them, and an outcome that can only occur under
control::

    A ~ Bern(expit(-1.4 + 0.1 x1 + 0.1 x2 - 0.1 x3))
    Y ~ Bern((1 - A) * expit(-4.64 + (x1 + x2 + x3) / 3))

Treated outcomes are identically zero, so ``theta = -psi``.

Each repetition uses one dataset, one fold plan and one nuisance fit shared
by every estimator.  All of a repetition's randomness is derived from
``RngStream(master_seed, (rep_id,))``, which keeps results identical whether
repetitions run serially or in a process pool.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, RngStream, make_fold_plan
from .diagnostics import TMLE_KINDS
from .errors import DegenerateEstimationError, SummaryError
from .estimators import (
    BASE_KINDS,
    ESTIMATOR_KINDS,
    TRANS_KINDS,
    DEFAULT_LOGIT_CLIP,
    LearnerConfig,
    estimate,
    estimator_label,
    fit_bounded_nuisances,
    fit_nuisances,
)

logger = logging.getLogger(__name__)

DEFAULT_Q_BOUNDS = ((0.0, 0.05), (0.0, 0.2))


@dataclass(frozen=True)
class DgpSpec:
    n: int
    treatment_intercept: float = -1.4
    treatment_slopes: tuple = (0.1, 0.1, -0.1)
    outcome_intercept: float = -4.64
    outcome_slope_scale: float = 1.0 / 3.0
    covariate_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        lo, hi = self.covariate_range
        if not lo < hi:
            raise ValueError("covariate_range must have lower < upper")
        object.__setattr__(self, "treatment_slopes", tuple(float(s) for s in self.treatment_slopes))
        object.__setattr__(self, "covariate_range", (float(lo), float(hi)))

    @property
    def d(self) -> int:
        return len(self.treatment_slopes)

    def propensity(self, x) -> np.ndarray:
        return expit(self.treatment_intercept + np.asarray(x) @ np.asarray(self.treatment_slopes))

    def outcome_regression(self, x) -> np.ndarray:
        """``E[Y | X=x, A=0]``."""
        return expit(self.outcome_intercept + self.outcome_slope_scale * np.asarray(x).sum(axis=-1))


def sample_dgp(spec: DgpSpec, rng: RngStream) -> Dataset:
    gen = rng.generator()
    lo, hi = spec.covariate_range
    x = gen.uniform(lo, hi, size=(spec.n, spec.d))
    a = (gen.random(spec.n) < spec.propensity(x)).astype(int)
    y = (gen.random(spec.n) < (1 - a) * spec.outcome_regression(x)).astype(float)
    return Dataset(x, a, y)


@dataclass(frozen=True)
class TruthRecord:
    psi_true: float
    theta_true: float
    method: str
    precision_estimate: float
    psi_monte_carlo: float | None = None
    monte_carlo_se: float | None = None


def _quadrature(spec: DgpSpec, nodes: int):
    t, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = spec.covariate_range
    pts = lo + (hi - lo) * (t + 1.0) / 2.0
    w = w / 2.0
    grids = np.meshgrid(*([pts] * spec.d), indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=1)
    weight = np.ones(x.shape[0])
    for wg in np.meshgrid(*([w] * spec.d), indexing="ij"):
        weight *= wg.ravel()
    g = spec.propensity(x)
    q = spec.outcome_regression(x)
    return float(np.dot(weight, g * q) / np.dot(weight, g))


def oracle_monte_carlo(spec: DgpSpec, draws: int, rng: RngStream, chunk: int = 1_000_000):
    """Ratio estimate of ``E[g Q] / E[g]`` from covariate draws, with a delta-method SE."""
    gen = rng.generator()
    lo, hi = spec.covariate_range
    s_r = s_s = s_rr = s_ss = s_rs = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x = gen.uniform(lo, hi, size=(m, spec.d))
        g = spec.propensity(x)
        r = g * spec.outcome_regression(x)
        s_r += r.sum()
        s_s += g.sum()
        s_rr += r @ r
        s_ss += g @ g
        s_rs += r @ g
        done += m
    psi = s_r / s_s
    mean_s = s_s / draws
    # variance of r - psi * s around zero
    var = (s_rr - 2 * psi * s_rs + psi * psi * s_ss) / draws
    se = math.sqrt(var / draws) / mean_s
    return float(psi), float(se)


def compute_truth(spec: DgpSpec, nodes: int = 40, mc_draws: int = 10_000_000, rng: RngStream | None = None) -> TruthRecord:
    """True ``psi`` by tensor Gauss-Legendre quadrature, cross-checked by an oracle Monte Carlo.

    ``mc_draws=0`` skips the Monte Carlo check.
    """
    if nodes < 32:
        raise ValueError("use at least 32 quadrature nodes per axis")
    psi = _quadrature(spec, nodes)
    mc, se = (None, None)
    if mc_draws > 0:
        mc, se = oracle_monte_carlo(spec, mc_draws, rng or RngStream(20240229, (99,)))
    return TruthRecord(psi, -psi, "quadrature", se if se is not None else float("nan"), mc, se)


# ---------------------------------------------------------------------------
# Monte Carlo repetitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorResult:
    label: str
    kind: str
    psi_hat: float
    theta_hat: float
    psi_se: float
    psi_lower: float
    psi_upper: float
    theta_se: float
    theta_lower: float
    theta_upper: float
    covered: bool
    negative: bool
    epsilons: tuple = ()
    any_diverged: bool = False
    mrad: float | None = None
    epsilon_flag: bool = False
    mrad_flag: bool = False

    @property
    def max_abs_epsilon(self) -> float | None:
        return max(abs(e) for e in self.epsilons) if self.epsilons else None


@dataclass(frozen=True)
class RepetitionResult:
    rep_id: int
    degenerate: bool
    estimators: dict = field(default_factory=dict)
    degeneracy_reason: str = ""
    # (label, fold assignment, q_pairs) kept only for selected repetitions
    concordance: tuple = ()


@dataclass(frozen=True)
class SimulationConfig:
    dgp: DgpSpec
    kinds: tuple = BASE_KINDS[1:]
    learners: LearnerConfig = field(default_factory=LearnerConfig)
    v_folds: int = 2
    logit_clip: float = DEFAULT_LOGIT_CLIP
    q_bounds: tuple = DEFAULT_Q_BOUNDS
    epsilon_threshold: float = 10.0
    mrad_threshold: float = 10.0
    level: float = 0.95
    keep_pairs_for: tuple = (0,)

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in ESTIMATOR_KINDS]
        if bad:
            raise ValueError(f"unknown estimator kinds {bad}")
        if self.v_folds < 2:
            raise ValueError("v_folds must be at least 2")
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "q_bounds", tuple(tuple(float(b) for b in qb) for qb in self.q_bounds))
        object.__setattr__(self, "keep_pairs_for", tuple(self.keep_pairs_for))


def _result_from_report(report, truth: TruthRecord, config: SimulationConfig) -> EstimatorResult:
    eps = tuple(float(r.epsilon) for r in report.fluctuations)
    mrad = report.mrad
    return EstimatorResult(
        label=report.label,
        kind=report.kind,
        psi_hat=report.psi_hat,
        theta_hat=report.theta_hat,
        psi_se=report.psi_ci.standard_error,
        psi_lower=report.psi_ci.lower,
        psi_upper=report.psi_ci.upper,
        theta_se=report.theta_ci.standard_error,
        theta_lower=report.theta_ci.lower,
        theta_upper=report.theta_ci.upper,
        covered=report.theta_ci.covers(truth.theta_true),
        negative=report.psi_hat < 0,
        epsilons=eps,
        any_diverged=report.any_diverged,
        mrad=mrad,
        epsilon_flag=bool(eps) and max(abs(e) for e in eps) > config.epsilon_threshold,
        mrad_flag=mrad is not None and mrad > config.mrad_threshold,
    )


def run_repetition(rep_id: int, config: SimulationConfig, truth: TruthRecord, master_seed: int) -> RepetitionResult:
    rng = RngStream(master_seed, (rep_id,))
    data = sample_dgp(config.dgp, rng.child(0))
    plan = make_fold_plan(data.n, config.v_folds, rng.child(1))
    keep = rep_id in config.keep_pairs_for
    try:
        nuisance = fit_nuisances(data, plan, config.learners, rng.child(2))
        reports = [
            estimate(k, data, plan, nuisance, config.logit_clip, config.level)
            for k in config.kinds
            if k in BASE_KINDS
        ]
        trans = [k for k in config.kinds if k in TRANS_KINDS]
        if trans:
            for bounds in config.q_bounds:
                bounded = fit_bounded_nuisances(data, plan, bounds, config.learners, rng.child(2), base=nuisance)
                reports.extend(estimate(k, data, plan, bounded, config.logit_clip, config.level) for k in trans)
    except DegenerateEstimationError as exc:
        logger.info("repetition %d degenerate: %s", rep_id, exc)
        return RepetitionResult(rep_id, True, {}, str(exc))
    results = {r.label: _result_from_report(r, truth, config) for r in reports}
    concordance = ()
    if keep:
        concordance = tuple((r.label, plan.assignment, r.q_pairs) for r in reports if r.q_pairs is not None)
    return RepetitionResult(rep_id, False, results, "", concordance)


def _run_chunk(args):
    rep_ids, config, truth, seed = args
    return [run_repetition(r, config, truth, seed) for r in rep_ids]


def run_monte_carlo(
    config: SimulationConfig,
    reps: int,
    master_seed: int,
    truth: TruthRecord | None = None,
    workers: int = 1,
) -> list[RepetitionResult]:
    """Run ``reps`` independent repetitions; results come back sorted by ``rep_id``."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    truth = truth or compute_truth(config.dgp, mc_draws=0)
    ids = list(range(reps))
    if workers <= 1:
        results = _run_chunk((ids, config, truth, master_seed))
    else:
        chunks = [ids[i::workers * 4] for i in range(min(reps, workers * 4))]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_run_chunk, [(c, config, truth, master_seed) for c in chunks]) for r in part]
    results.sort(key=lambda r: r.rep_id)
    if all(r.degenerate for r in results):
        raise SummaryError(f"all {reps} repetitions were degenerate")
    return results


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def parse_filter(spec) -> tuple[str, float] | None:
    """``None``/``"none"`` or ``"epsilon:T"`` / ``"mrad:T"`` (also accepts ``(rule, T)``)."""
    if spec is None or spec == "none":
        return None
    if isinstance(spec, str):
        rule, _, value = spec.partition(":")
        try:
            threshold = float(value)
        except ValueError:
            raise ValueError(f"bad filter {spec!r}; expected none, epsilon:T or mrad:T") from None
    else:
        rule, threshold = spec
        threshold = float(threshold)
    if rule not in ("epsilon", "mrad"):
        raise ValueError(f"unknown filter rule {rule!r}")
    return rule, threshold


def filter_name(spec) -> str:
    parsed = parse_filter(spec)
    if parsed is None:
        return "none"
    return f"{parsed[0]}:{parsed[1]:g}"


def _flagged(res: EstimatorResult, rule: str, threshold: float) -> bool:
    if rule == "epsilon":
        return res.max_abs_epsilon is not None and res.max_abs_epsilon > threshold
    return res.mrad is not None and res.mrad > threshold


@dataclass(frozen=True)
class EstimatorSummary:
    reps_used: int
    bias: float
    bias_mc_se: float
    mse: float
    ci_coverage: float
    coverage_mc_se: float
    negative_proportion: float
    psi_mean: float
    psi_median: float
    psi_bias: float
    psi_mse: float
    psi_ci_coverage: float


@dataclass(frozen=True)
class MonteCarloSummary:
    filter_mode: str
    filter_scope: str
    psi_true: float
    theta_true: float
    total_reps: int
    degenerate_reps: int
    estimators: dict

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = {k: asdict(v) for k, v in self.estimators.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MonteCarloSummary":
        ests = {k: EstimatorSummary(**v) for k, v in d["estimators"].items()}
        return cls(**{**d, "estimators": ests})


def _summarize_one(rows: Sequence[EstimatorResult], truth: TruthRecord, level_truth_psi: float) -> EstimatorSummary:
    theta = np.array([r.theta_hat for r in rows])
    psi = np.array([r.psi_hat for r in rows])
    err = theta - truth.theta_true
    perr = psi - level_truth_psi
    m = len(rows)
    covered = np.array([r.theta_lower <= truth.theta_true <= r.theta_upper for r in rows], dtype=float)
    psi_cov = np.array([r.psi_lower <= truth.psi_true <= r.psi_upper for r in rows], dtype=float)
    cov = float(covered.mean())
    return EstimatorSummary(
        reps_used=m,
        bias=float(err.mean()),
        bias_mc_se=float(err.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan"),
        mse=float(np.mean(err * err)),
        ci_coverage=cov,
        coverage_mc_se=math.sqrt(cov * (1 - cov) / m),
        negative_proportion=float(np.mean(psi < 0)),
        psi_mean=float(psi.mean()),
        psi_median=float(np.median(psi)),
        psi_bias=float(perr.mean()),
        psi_mse=float(np.mean(perr * perr)),
        psi_ci_coverage=float(psi_cov.mean()),
    )


def summarize(
    results: Sequence[RepetitionResult],
    truth: TruthRecord,
    filter=None,
    filter_scope: str = "run_level",
    filter_kinds: Sequence[str] = TMLE_KINDS,
) -> MonteCarloSummary:
    """Bias, MSE and coverage for ``theta`` (plus ``psi``-scale companions) per estimator.

    ``filter`` drops TMLE results whose diagnostic exceeds a threshold.  With
    ``filter_scope="run_level"`` a repetition is removed for every estimator
    as soon as any TMLE in ``filter_kinds`` is flagged; with
    ``"per_estimator"`` only the flagged TMLE's own result is removed.
    """
    if filter_scope not in ("run_level", "per_estimator"):
        raise ValueError(f"unknown filter scope {filter_scope!r}")
    rule = parse_filter(filter)
    live = sorted((r for r in results if not r.degenerate), key=lambda r: r.rep_id)
    if not live:
        raise SummaryError("no non-degenerate repetitions to summarize")
    labels = list(live[0].estimators)

    per_label: dict[str, list] = {lab: [] for lab in labels}
    for rep in live:
        if rule is not None and filter_scope == "run_level":
            if any(
                _flagged(res, *rule) for res in rep.estimators.values() if res.kind in filter_kinds
            ):
                continue
        for lab in labels:
            res = rep.estimators[lab]
            if rule is not None and filter_scope == "per_estimator" and res.kind in filter_kinds:
                if _flagged(res, *rule):
                    continue
            per_label[lab].append(res)

    empty = [lab for lab, rows in per_label.items() if not rows]
    if empty:
        raise SummaryError(f"no repetitions survive the filter for {empty}")
    return MonteCarloSummary(
        filter_mode=filter_name(filter),
        filter_scope=filter_scope,
        psi_true=truth.psi_true,
        theta_true=truth.theta_true,
        total_reps=len(results),
        degenerate_reps=len(results) - len(live),
        estimators={lab: _summarize_one(rows, truth, truth.psi_true) for lab, rows in per_label.items()},
    )


def fraction_large_epsilon(results: Sequence[RepetitionResult], threshold: float = 10.0, kinds=TMLE_KINDS) -> float:
    """Share of non-degenerate repetitions where some TMLE in ``kinds`` has ``|eps| > threshold``."""
    live = [r for r in results if not r.degenerate]
    hit = sum(
        any(res.kind in kinds and _flagged(res, "epsilon", threshold) for res in r.estimators.values()) for r in live
    )
    return hit / len(live)


__all__ = [
    "DgpSpec",
    "EstimatorResult",
    "EstimatorSummary",
    "MonteCarloSummary",
    "DEFAULT_Q_BOUNDS",
    "RepetitionResult",
    "SimulationConfig",
    "TruthRecord",
    "compute_truth",
    "filter_name",
    "fraction_large_epsilon",
    "oracle_monte_carlo",
    "parse_filter",
    "run_monte_carlo",
    "run_repetition",
    "sample_dgp",
    "summarize",
    "estimator_label",
]
