"""Efficient influence function, standard errors and Wald intervals.

For ``psi = E[E[Y | X, A=0] | A=1]`` the influence function evaluated at
nuisances ``(q, g, pi)`` and parameter value ``psi`` is::

    1(a=0) * g / (pi * (1 - g)) * (y - q) + 1(a=1) / pi * (q - psi)

Standard errors are ``sqrt(mean(D**2)) / sqrt(n)`` with every observation's
``D`` evaluated at the nuisances fitted outside its own fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset, FoldPlan


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Cross-fitted nuisances plus their values at each observation's own fold.

    ``q`` holds outcome-regression predictions on the scale the models were
    trained on.  For the bounded variant that is the rescaled scale, with
    ``q_bounds = (l, u)`` recording the map back; :attr:`q_outcome_scale`
    always returns predictions on the outcome scale.
    """

    q_models: tuple
    g_models: tuple
    pi_folds: np.ndarray
    q: np.ndarray
    g: np.ndarray
    pi: np.ndarray
    propensity_bounds: tuple[float, float]
    q_bounds: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.pi_folds <= 0) or np.any(self.pi_folds > 1):
            raise ValueError("fold treated fractions must lie in (0, 1]")
        lo, hi = self.propensity_bounds
        if np.any(self.g < lo) or np.any(self.g > hi):
            raise ValueError("propensity predictions outside the clip interval")

    @property
    def q_outcome_scale(self) -> np.ndarray:
        if self.q_bounds is None:
            return self.q
        lo, hi = self.q_bounds
        return lo + (hi - lo) * self.q


@dataclass(frozen=True)
class WaldInterval:
    estimate: float
    standard_error: float
    lower: float
    upper: float
    level: float = 0.95

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "standard_error": self.standard_error,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
        }


def eif_value(q, g, pi, psi, a, y):
    """Influence function of ``psi`` at one or many observations (numpy broadcasting)."""
    q, g, pi, a, y = (np.asarray(v, dtype=float) for v in (q, g, pi, a, y))
    if np.any(g >= 1.0):
        raise ZeroDivisionError("propensity equal to 1 in the influence function")
    if np.any(pi == 0.0):
        raise ZeroDivisionError("treated fraction equal to 0 in the influence function")
    control = a == 0
    out = np.where(control, g / (pi * (1.0 - g)) * (y - q), (q - psi) / pi)
    return float(out) if out.ndim == 0 else out


def standard_error_from_eif(values) -> float:
    d = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(d * d)) / np.sqrt(d.size))


def eif_standard_error(
    dataset: Dataset,
    plan: FoldPlan,
    nuisance: NuisanceFit,
    psi: float,
    q_source: str = "initial",
    q_targeted=None,
) -> float:
    """EIF-based standard error for ``psi``.

    ``q_source="initial"`` uses the fitted outcome regression (DML-style
    estimators); ``"targeted"`` uses ``q_targeted``, the per-observation
    fluctuated regression of a TMLE.
    """
    if plan.n != dataset.n:
        raise ValueError("fold plan and dataset sizes differ")
    if not np.isfinite(psi):
        raise ValueError("psi must be finite")
    if q_source == "initial":
        q = nuisance.q_outcome_scale
    elif q_source == "targeted":
        if q_targeted is None:
            raise ValueError("q_targeted is required when q_source='targeted'")
        q = np.asarray(q_targeted, dtype=float)
    else:
        raise ValueError(f"unknown q_source {q_source!r}")
    d = eif_value(q, nuisance.g, nuisance.pi, psi, dataset.a, dataset.y)
    return standard_error_from_eif(d)


def normal_quantile(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


def wald_interval(estimate: float, se: float, level: float = 0.95) -> WaldInterval:
    """Symmetric normal interval; never truncated to the parameter space.

    A zero standard error (every influence value exactly zero, which happens
    when a TMLE collapses onto a constant zero regression) gives the
    degenerate interval ``[estimate, estimate]``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    if not np.isfinite(se) or se < 0:
        raise ValueError(f"standard error must be a nonnegative finite number, got {se}")
    z = normal_quantile(level)
    return WaldInterval(float(estimate), float(se), float(estimate - z * se), float(estimate + z * se), level)


def att_eif(dataset: Dataset, pi, psi_eif, treated_mean: float) -> np.ndarray:
    """Influence values of ``theta = E[Y | A=1] - psi`` given those of ``psi``."""
    a, y = dataset.a, dataset.y
    pi = np.asarray(pi, dtype=float)
    return np.where(a == 1, (y - treated_mean) / pi, 0.0) - np.asarray(psi_eif, dtype=float)
