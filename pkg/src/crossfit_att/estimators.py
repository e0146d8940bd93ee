"""Cross-fitted estimators of ``psi = E[Y(0) | A=1]`` and the ATT.

All estimators in one analysis share a single :class:`NuisanceFit`, so the
initial outcome regression, the clipped propensity score and the per-fold
treated fraction are identical across them.

Kinds
-----
``naive``      treated-average of the initial outcome regression.
``tmle_c``     fold-wise targeting with the clever covariate as a slope.
``tmle_w``     fold-wise targeting with an intercept and inverse-odds weights.
``tmle_cp``    like ``tmle_c`` but one regression over the pooled sample.
``tmle_wp``    like ``tmle_w`` but pooled.
``dml``        one-step correction of the naive estimator.
``dml_cl``     ``dml`` clipped to [0, 1].
``*_trans``    TMLE with the outcome rescaled through bounds ``[l, u]`` on
               the outcome regression (see :func:`fit_bounded_nuisances`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FoldPlan, RngStream, treated_fraction
from .diagnostics import safe_mrad
from .errors import DegenerateEstimationError, LearnerTrainingError, TargetingDegenerateError
from .glm import GlmSpec, expit, logit, scaled_logistic_fit
from .inference import (
    NuisanceFit,
    WaldInterval,
    att_eif,
    eif_value,
    standard_error_from_eif,
    wald_interval,
)
from .learners import LearnerSpec, ClippedRegressor, default_library, discrete_super_learner, fit_learner

TMLE_VARIANTS = ("c", "w", "cp", "wp")
BASE_KINDS = ("naive", "tmle_c", "tmle_w", "tmle_cp", "tmle_wp", "dml", "dml_cl")
TRANS_KINDS = ("tmle_c_trans", "tmle_w_trans", "tmle_cp_trans", "tmle_wp_trans")
ESTIMATOR_KINDS = BASE_KINDS + TRANS_KINDS
DEFAULT_LOGIT_CLIP = 1e4


@dataclass(frozen=True)
class LearnerConfig:
    q_library: tuple = field(default_factory=lambda: tuple(default_library()))
    g_library: tuple = field(default_factory=lambda: tuple(default_library()))
    v_cv: int = 5
    propensity_bounds: tuple[float, float] = (0.05, 0.5)

    def __post_init__(self):
        lo, hi = self.propensity_bounds
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"invalid propensity bounds [{lo}, {hi}]")
        if hi >= 1.0:
            raise ValueError("upper propensity bound must be below 1 for finite inverse-odds weights")
        if self.v_cv < 2:
            raise ValueError("v_cv must be at least 2")
        if not self.q_library or not self.g_library:
            raise ValueError("learner libraries must be nonempty")
        object.__setattr__(self, "q_library", tuple(self.q_library))
        object.__setattr__(self, "g_library", tuple(self.g_library))


@dataclass(frozen=True)
class FluctuationRecord:
    fold: int | str
    epsilon: float
    diverged: bool
    targeting_mode: str
    converged: bool = True


@dataclass(frozen=True, eq=False)
class EstimateReport:
    kind: str
    psi_hat: float
    theta_hat: float
    psi_ci: WaldInterval
    theta_ci: WaldInterval
    fluctuations: tuple = ()
    q_pairs: np.ndarray | None = field(default=None, repr=False)
    mrad: float | None = None
    q_bounds: tuple[float, float] | None = None
    nuisance_meta: dict = field(default_factory=dict, repr=False)
    psi_eif: np.ndarray | None = field(default=None, repr=False)
    fold_psi: np.ndarray | None = field(default=None, repr=False)
    # |I_v|^-1 sum W (y - Q*) per fold, or one pooled value
    targeting_residuals: np.ndarray | None = field(default=None, repr=False)

    @property
    def label(self) -> str:
        return estimator_label(self.kind, self.q_bounds)

    @property
    def is_tmle(self) -> bool:
        return self.kind.startswith("tmle")

    @property
    def max_abs_epsilon(self) -> float | None:
        if not self.fluctuations:
            return None
        return max(abs(r.epsilon) for r in self.fluctuations)

    @property
    def any_diverged(self) -> bool:
        return any(r.diverged for r in self.fluctuations)


def estimator_label(kind: str, q_bounds=None) -> str:
    if q_bounds is None:
        return kind
    return f"{kind}[{q_bounds[0]:g},{q_bounds[1]:g}]"


# ---------------------------------------------------------------------------
# nuisances
# ---------------------------------------------------------------------------


def _super_learner(library, x, y, v_cv, rng, scaled=False):
    n = y.shape[0]
    v_eff = min(v_cv, n // 2)
    if v_eff < 2:
        candidates = [s for s in library if s.kind == "constant_rate"] or [LearnerSpec("constant_rate")]
        return fit_learner(candidates[0], x, y, rng, scaled=scaled)
    return discrete_super_learner(library, x, y, v_eff, rng, scaled=scaled)


def _check_folds(dataset: Dataset, plan: FoldPlan):
    if plan.n != dataset.n:
        raise ValueError(f"fold plan covers {plan.n} observations, dataset has {dataset.n}")
    for v in range(plan.v_count):
        if not np.any(dataset.a[plan.in_fold(v)] == 1):
            raise DegenerateEstimationError(f"fold {v} contains no treated observations", fold=v)


def _fit_propensity(dataset, plan, config, rng):
    lo, hi = config.propensity_bounds
    models, g = [], np.empty(dataset.n)
    for v in range(plan.v_count):
        out, idx = plan.out_of_fold(v), plan.in_fold(v)
        raw = _super_learner(config.g_library, dataset.x[out], dataset.a[out].astype(float), config.v_cv, rng.child(v, 1))
        model = ClippedRegressor(raw, lo, hi)
        models.append(model)
        g[idx] = model.predict(dataset.x[idx])
    pi_folds = np.array([treated_fraction(dataset, plan.in_fold(v)) for v in range(plan.v_count)])
    return tuple(models), g, pi_folds


def _fit_outcome(dataset, plan, config, rng, q_bounds=None):
    models, q = [], np.empty(dataset.n)
    y = dataset.y
    if q_bounds is not None:
        lo, hi = q_bounds
        y = (y - lo) / (hi - lo)
    for v in range(plan.v_count):
        out = plan.out_of_fold(v)
        controls = out[dataset.a[out] == 0]
        if controls.size < 2:
            raise DegenerateEstimationError(f"fewer than two controls outside fold {v}", fold=v)
        model = _super_learner(
            config.q_library, dataset.x[controls], y[controls], config.v_cv, rng.child(v, 0), scaled=q_bounds is not None
        )
        models.append(model)
        idx = plan.in_fold(v)
        q[idx] = model.predict(dataset.x[idx])
    return tuple(models), q


def _selected_names(models):
    return [getattr(m, "name", type(m).__name__) for m in models]


def fit_nuisances(dataset: Dataset, plan: FoldPlan, config: LearnerConfig | None = None, rng: RngStream | None = None) -> NuisanceFit:
    """Fit the outcome regression on out-of-fold controls and the propensity on all out-of-fold data."""
    config = config or LearnerConfig()
    rng = rng or RngStream(0)
    _check_folds(dataset, plan)
    q_models, q = _fit_outcome(dataset, plan, config, rng)
    g_models, g, pi_folds = _fit_propensity(dataset, plan, config, rng)
    meta = {
        "propensity_bounds": list(config.propensity_bounds),
        "q_learners": _selected_names(q_models),
        "g_learners": _selected_names(g_models),
    }
    return NuisanceFit(
        q_models, g_models, pi_folds, q, g, pi_folds[plan.assignment], tuple(config.propensity_bounds), None, meta
    )


def fit_bounded_nuisances(
    dataset: Dataset,
    plan: FoldPlan,
    q_bounds,
    config: LearnerConfig | None = None,
    rng: RngStream | None = None,
    base: NuisanceFit | None = None,
) -> NuisanceFit:
    """Nuisances for the bounded-outcome TMLE.

    The outcome is mapped to ``(y - l) / (u - l)`` and the outcome regression
    is trained with the scaled logistic loss; learners that cannot use that
    loss are skipped.  Propensity and treated fractions are taken from
    ``base`` when given (they do not involve the outcome), otherwise refit
    with the same random substreams :func:`fit_nuisances` uses.
    """
    lo, hi = _check_bounds(q_bounds)
    config = config or LearnerConfig()
    rng = rng or RngStream(0)
    _check_folds(dataset, plan)
    q_models, q = _fit_outcome(dataset, plan, config, rng, q_bounds=(lo, hi))
    if base is not None:
        g_models, g, pi_folds = base.g_models, base.g, base.pi_folds
        g_names = base.meta.get("g_learners", _selected_names(g_models))
    else:
        g_models, g, pi_folds = _fit_propensity(dataset, plan, config, rng)
        g_names = _selected_names(g_models)
    meta = {
        "propensity_bounds": list(config.propensity_bounds),
        "q_bounds": [lo, hi],
        "q_learners": _selected_names(q_models),
        "g_learners": g_names,
    }
    return NuisanceFit(
        q_models, g_models, pi_folds, q, g, pi_folds[plan.assignment], tuple(config.propensity_bounds), (lo, hi), meta
    )


def _check_bounds(q_bounds):
    lo, hi = (float(b) for b in q_bounds)
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"invalid outcome-regression bounds [{lo}, {hi}]")
    return lo, hi


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _inverse_odds(nuisance: NuisanceFit) -> np.ndarray:
    g = nuisance.g
    return g / (nuisance.pi * (1.0 - g))


def _crossfit_average(plan: FoldPlan, fold_values) -> float:
    return float(np.dot(plan.sizes(), fold_values) / plan.n)


def _treated_mean_by_fold(dataset, plan, values) -> np.ndarray:
    out = np.empty(plan.v_count)
    for v in range(plan.v_count):
        idx = plan.in_fold(v)
        treated = idx[dataset.a[idx] == 1]
        if treated.size == 0:
            raise DegenerateEstimationError(f"fold {v} contains no treated observations", fold=v)
        out[v] = values[treated].mean()
    return out


def estimate_att(dataset: Dataset, psi_report: EstimateReport, nuisance: NuisanceFit | None = None, level=None):
    """``theta = mean(y | a=1) - psi`` with its influence-function interval."""
    treated = dataset.a == 1
    if not treated.any():
        raise ValueError("no treated observations")
    treated_mean = float(dataset.y[treated].mean())
    theta = treated_mean - psi_report.psi_hat
    level = level or psi_report.psi_ci.level
    pi = nuisance.pi if nuisance is not None else psi_report.nuisance_meta["pi"]
    d = att_eif(dataset, pi, psi_report.psi_eif, treated_mean)
    return theta, wald_interval(theta, standard_error_from_eif(d), level)


def _report(kind, dataset, nuisance, psi, q_for_eif, level, **extra) -> EstimateReport:
    d = eif_value(q_for_eif, nuisance.g, nuisance.pi, psi, dataset.a, dataset.y)
    psi_ci = wald_interval(psi, standard_error_from_eif(d), level)
    meta = dict(nuisance.meta)
    meta["pi"] = nuisance.pi
    draft = EstimateReport(kind, float(psi), float("nan"), psi_ci, psi_ci, nuisance_meta=meta, psi_eif=d, **extra)
    theta, theta_ci = estimate_att(dataset, draft, nuisance, level)
    return EstimateReport(
        kind,
        float(psi),
        float(theta),
        psi_ci,
        theta_ci,
        nuisance_meta=meta,
        psi_eif=d,
        **extra,
    )


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def estimate_naive(dataset: Dataset, plan: FoldPlan, nuisance: NuisanceFit, level: float = 0.95) -> EstimateReport:
    q = nuisance.q_outcome_scale
    fold_psi = _treated_mean_by_fold(dataset, plan, q)
    psi = _crossfit_average(plan, fold_psi)
    return _report("naive", dataset, nuisance, psi, q, level, fold_psi=fold_psi)


def estimate_dml(dataset: Dataset, plan: FoldPlan, nuisance: NuisanceFit, clip_to_unit: bool = False, level: float = 0.95) -> EstimateReport:
    """One-step estimator; with ``clip_to_unit`` the final cross-fit estimate is clipped to [0, 1].

    The clipped variant's interval is centred at the clipped estimate and its
    influence values are evaluated at that clipped value.
    """
    q = nuisance.q_outcome_scale
    naive = _treated_mean_by_fold(dataset, plan, q)
    correction = np.where(dataset.a == 0, _inverse_odds(nuisance) * (dataset.y - q), 0.0)
    fold_psi = naive + np.array([correction[plan.in_fold(v)].mean() for v in range(plan.v_count)])
    psi = _crossfit_average(plan, fold_psi)
    kind = "dml"
    if clip_to_unit:
        psi = min(max(psi, 0.0), 1.0)
        kind = "dml_cl"
    return _report(kind, dataset, nuisance, psi, q, level, fold_psi=fold_psi)


def _fit_fluctuation(responses, offsets, covariate, weights, mode, glm_spec):
    if mode == "clever_covariate":
        spec = GlmSpec(
            include_intercept=False,
            max_iterations=glm_spec.max_iterations,
            convergence_tolerance=glm_spec.convergence_tolerance,
        )
        return scaled_logistic_fit(responses, covariate, offsets, None, spec)
    spec = GlmSpec(
        include_intercept=True,
        max_iterations=glm_spec.max_iterations,
        convergence_tolerance=glm_spec.convergence_tolerance,
    )
    return scaled_logistic_fit(responses, None, offsets, weights, spec)


def estimate_tmle(
    dataset: Dataset,
    plan: FoldPlan,
    nuisance: NuisanceFit,
    variant: str,
    logit_clip: float = DEFAULT_LOGIT_CLIP,
    level: float = 0.95,
    glm_spec: GlmSpec | None = None,
) -> EstimateReport:
    """Targeted plug-in estimator.

    ``variant`` is ``"c"``/``"w"`` (one fluctuation per fold) or
    ``"cp"``/``"wp"`` (one fluctuation over the pooled sample).  The offset is
    ``logit(Q)`` clipped to ``[-logit_clip, logit_clip]`` so that an initial
    regression of exactly zero stays usable.  If ``nuisance`` was produced by
    :func:`fit_bounded_nuisances`, targeting runs on the rescaled outcome and
    the result is the matching ``*_trans`` kind.
    """
    if variant not in TMLE_VARIANTS:
        raise ValueError(f"unknown TMLE variant {variant!r}")
    if not logit_clip > 0:
        raise ValueError("logit_clip must be positive")
    glm_spec = glm_spec or GlmSpec()
    _check_folds(dataset, plan)
    bounded = nuisance.q_bounds is not None
    lo, hi = nuisance.q_bounds if bounded else (0.0, 1.0)
    y_scaled = (dataset.y - lo) / (hi - lo)
    offsets = np.clip(logit(nuisance.q), -logit_clip, logit_clip)
    clever = _inverse_odds(nuisance)
    control = dataset.a == 0
    weights = np.where(control, clever, 0.0)
    mode = "clever_covariate" if variant in ("c", "cp") else "weighted"
    pooled = variant in ("cp", "wp")

    groups = [("pooled", np.arange(dataset.n))] if pooled else [(v, plan.in_fold(v)) for v in range(plan.v_count)]
    q_star_scaled = np.empty(dataset.n)
    records = []
    for fold, idx in groups:
        if mode == "clever_covariate":
            rows = idx[control[idx]]
            if rows.size == 0:
                raise TargetingDegenerateError(f"no control observations for targeting in fold {fold}", fold=fold)
            fit = _fit_fluctuation(y_scaled[rows], offsets[rows], clever[rows], None, mode, glm_spec)
            eps = float(fit.coefficients[0])
            q_star_scaled[idx] = expit(offsets[idx] + eps * clever[idx])
        else:
            if not np.any(weights[idx] > 0):
                raise TargetingDegenerateError(f"zero total targeting weight in fold {fold}", fold=fold)
            fit = _fit_fluctuation(y_scaled[idx], offsets[idx], None, weights[idx], mode, glm_spec)
            eps = float(fit.coefficients[0])
            q_star_scaled[idx] = expit(offsets[idx] + eps)
        records.append(FluctuationRecord(fold, eps, fit.diverged, mode, fit.converged))

    q_star = lo + (hi - lo) * q_star_scaled
    resid = weights * (dataset.y - q_star)
    if pooled:
        treated = dataset.a == 1
        psi = float(q_star[treated].mean())
        fold_psi = None
        residuals = np.array([resid.mean()])
    else:
        fold_psi = _treated_mean_by_fold(dataset, plan, q_star)
        psi = _crossfit_average(plan, fold_psi)
        residuals = np.array([resid[plan.in_fold(v)].mean() for v in range(plan.v_count)])
    # guard against float drift past the bounds
    psi = min(max(psi, lo), hi)

    q_initial = nuisance.q_outcome_scale
    pairs = np.column_stack([q_initial, q_star])
    kind = f"tmle_{variant}" + ("_trans" if bounded else "")
    return _report(
        kind,
        dataset,
        nuisance,
        psi,
        q_star,
        level,
        fluctuations=tuple(records),
        q_pairs=pairs,
        mrad=safe_mrad(pairs),
        q_bounds=nuisance.q_bounds,
        fold_psi=fold_psi,
        targeting_residuals=residuals,
    )


def estimate_bounded_tmle(
    dataset: Dataset,
    plan: FoldPlan,
    config: LearnerConfig | None,
    variant: str,
    q_bounds,
    rng: RngStream | None = None,
    logit_clip: float = DEFAULT_LOGIT_CLIP,
    level: float = 0.95,
    base: NuisanceFit | None = None,
) -> EstimateReport:
    """Fit bounded nuisances and run the requested TMLE variant on them."""
    nuisance = fit_bounded_nuisances(dataset, plan, q_bounds, config, rng, base=base)
    return estimate_tmle(dataset, plan, nuisance, variant, logit_clip, level)


def estimate(kind: str, dataset: Dataset, plan: FoldPlan, nuisance: NuisanceFit, logit_clip=DEFAULT_LOGIT_CLIP, level=0.95):
    """Dispatch by kind name.  ``*_trans`` kinds need a bounded ``nuisance``."""
    if kind == "naive":
        return estimate_naive(dataset, plan, nuisance, level)
    if kind in ("dml", "dml_cl"):
        return estimate_dml(dataset, plan, nuisance, clip_to_unit=kind == "dml_cl", level=level)
    if kind in TRANS_KINDS:
        if nuisance.q_bounds is None:
            raise ValueError(f"{kind} requires nuisances fitted with outcome-regression bounds")
        return estimate_tmle(dataset, plan, nuisance, kind[len("tmle_") : -len("_trans")], logit_clip, level)
    if kind in ("tmle_c", "tmle_w", "tmle_cp", "tmle_wp"):
        if nuisance.q_bounds is not None:
            raise ValueError(f"{kind} expects nuisances without outcome-regression bounds")
        return estimate_tmle(dataset, plan, nuisance, kind[len("tmle_") :], logit_clip, level)
    raise ValueError(f"unknown estimator kind {kind!r}")


__all__ = [
    "BASE_KINDS",
    "ESTIMATOR_KINDS",
    "TRANS_KINDS",
    "EstimateReport",
    "FluctuationRecord",
    "LearnerConfig",
    "LearnerTrainingError",
    "estimate",
    "estimate_att",
    "estimate_bounded_tmle",
    "estimate_dml",
    "estimate_naive",
    "estimate_tmle",
    "estimator_label",
    "fit_bounded_nuisances",
    "fit_nuisances",
]
