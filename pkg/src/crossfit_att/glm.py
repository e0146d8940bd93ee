"""Logistic GLM fitting by damped Newton (IRLS) with offsets and weights.

The same routine serves binary, fractional and *scaled* responses.  The
per-observation loss is written as::

    (1 - y) * softplus(eta) + y * softplus(-eta)

which equals ``softplus(eta) - y * eta`` for every real ``y``.  It is affine in
``y`` and convex in ``eta``, so a response outside [0, 1] (the rescaled
outcome of the bounded TMLE) is handled by the exact same Newton iterations.

Separation is not an error.  When the likelihood keeps increasing along some
direction the iterates walk off towards infinity, Newton steps stay of order
one instead of shrinking, and after ``max_iterations`` the last iterate is
returned with ``diverged=True``.  Huge fluctuation coefficients are a
diagnostic signal downstream, so they must not be regularized away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "GlmSpec",
    "GlmFit",
    "fit_glm_logistic",
    "scaled_logistic_fit",
    "clip_propensity",
    "logistic_loglik",
    "logistic_score",
    "ConvergenceError",
    "expit",
    "logit",
]


class ConvergenceError(RuntimeError):
    """Raised instead of returning a diverged fit when ``allow_divergence`` is off."""


@dataclass(frozen=True)
class GlmSpec:
    include_intercept: bool = True
    max_iterations: int = 100
    # on max |score| / sum(weights)
    convergence_tolerance: float = 1e-10
    allow_divergence: bool = True
    max_halvings: int = 30

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.convergence_tolerance > 0:
            raise ValueError("convergence_tolerance must be positive")


@dataclass(frozen=True)
class GlmFit:
    """Coefficients are ordered ``[intercept, design columns...]`` when an intercept is fitted."""

    coefficients: np.ndarray
    converged: bool
    diverged: bool
    final_score_norm: float
    iterations_used: int
    include_intercept: bool = True

    @property
    def intercept(self) -> float:
        if not self.include_intercept:
            return 0.0
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:] if self.include_intercept else self.coefficients

    def linear_predictor(self, design, offsets=None) -> np.ndarray:
        design = _as_design(design)
        eta = design @ self.slopes + self.intercept
        if offsets is not None:
            eta = eta + np.asarray(offsets, dtype=float)
        return eta

    def predict(self, design, offsets=None) -> np.ndarray:
        return expit(self.linear_predictor(design, offsets))


def _as_design(design) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    return design


def _full_design(design: np.ndarray, include_intercept: bool) -> np.ndarray:
    if include_intercept:
        return np.hstack([np.ones((design.shape[0], 1)), design])
    return design


def _objective(eta, y, w) -> float:
    loss = (1.0 - y) * np.logaddexp(0.0, eta) + y * np.logaddexp(0.0, -eta)
    return -float(np.dot(w, loss))


def logistic_loglik(coefficients, responses, design, offsets=None, weights=None, include_intercept=True) -> float:
    """Weighted log-likelihood ``sum w [y log mu + (1 - y) log(1 - mu)]`` (any real ``y``)."""
    y = np.asarray(responses, dtype=float)
    X = _full_design(_as_design(design), include_intercept)
    off = np.zeros_like(y) if offsets is None else np.asarray(offsets, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    return _objective(off + X @ np.asarray(coefficients, dtype=float), y, w)


def logistic_score(coefficients, responses, design, offsets=None, weights=None, include_intercept=True) -> np.ndarray:
    """Gradient of :func:`logistic_loglik` with respect to the coefficients."""
    y = np.asarray(responses, dtype=float)
    X = _full_design(_as_design(design), include_intercept)
    off = np.zeros_like(y) if offsets is None else np.asarray(offsets, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    return X.T @ (w * _mean_and_residual(off + X @ np.asarray(coefficients, dtype=float), y)[1])


def _mean_and_residual(eta, y):
    # y - mu without cancellation once mu saturates at 0 or 1
    mu = expit(eta)
    return mu, y * expit(-eta) - (1.0 - y) * mu


def _newton_direction(info, score):
    try:
        if np.linalg.cond(info) > 1e14:
            return None
        step = np.linalg.solve(info, score)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _validate(responses, design, offsets, weights, spec, bounded):
    y = np.asarray(responses, dtype=float)
    if y.ndim != 1:
        raise ValueError("responses must be a vector")
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one observation")
    X = _as_design(design) if design is not None else np.empty((n, 0))
    if X.shape[0] != n:
        raise ValueError(f"design has {X.shape[0]} rows, responses {n}")
    off = np.zeros(n) if offsets is None else np.asarray(offsets, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if off.shape != (n,) or w.shape != (n,):
        raise ValueError("offsets and weights must match the number of responses")
    for name, arr in (("responses", y), ("design", X), ("offsets", off), ("weights", w)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("weights are all zero")
    if bounded and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError("responses must lie in [0, 1]; use scaled_logistic_fit for other ranges")
    if not spec.include_intercept and X.shape[1] == 0:
        raise ValueError("a model without intercept needs at least one design column")
    return y, X, off, w


def _newton(y, X, off, w, spec: GlmSpec) -> GlmFit:
    from .errors import RankDeficiencyError

    keep = w > 0
    k = X.shape[1] + int(spec.include_intercept)
    if k > int(keep.sum()):
        raise RankDeficiencyError(f"{k} coefficients but only {int(keep.sum())} positively weighted observations")
    y, off, w = y[keep], off[keep], w[keep]
    Xf = _full_design(X[keep], spec.include_intercept)
    wsum = float(w.sum())

    beta = np.zeros(k)
    eta = off.copy()
    obj = _objective(eta, y, w)
    cap = 4.0
    converged = False
    iterations = 0
    for iterations in range(1, spec.max_iterations + 1):
        mu, resid = _mean_and_residual(eta, y)
        score = Xf.T @ (w * resid)
        score_norm = float(np.max(np.abs(score))) / wsum
        curvature = w * mu * expit(-eta)
        info = Xf.T @ (Xf * curvature[:, None])
        step = _newton_direction(info, score)
        if score_norm <= spec.convergence_tolerance:
            if step is None or np.max(np.abs(step)) <= 1e-8 * (1.0 + np.max(np.abs(beta))):
                converged = True
                break
        if step is None:
            # flat likelihood curvature (saturated fitted values): move along the score
            step = score / np.max(np.abs(score)) * cap
            capped = True
        else:
            size = float(np.max(np.abs(step)))
            capped = size > cap
            if capped:
                step = step * (cap / size)
        t = 1.0
        for _ in range(spec.max_halvings + 1):
            cand = beta + t * step
            cand_eta = off + Xf @ cand
            cand_obj = _objective(cand_eta, y, w)
            # rounding slack: near the optimum the objective change drowns in float noise
            if cand_obj >= obj - 1e-13 * max(1.0, abs(obj)):
                break
            t *= 0.5
        else:
            break
        if capped and t == 1.0:
            cap *= 2.0
        beta, eta, obj = cand, cand_eta, cand_obj

    final = float(np.max(np.abs(Xf.T @ (w * _mean_and_residual(eta, y)[1])))) / wsum
    if converged and final > spec.convergence_tolerance:
        converged = False
    fit = GlmFit(beta, converged, not converged, final, iterations, spec.include_intercept)
    if not converged and not spec.allow_divergence:
        raise ConvergenceError(f"logistic fit did not converge after {iterations} iterations (score {final:.3g})")
    return fit


def fit_glm_logistic(responses, design=None, offsets=None, weights=None, spec: GlmSpec | None = None) -> GlmFit:
    """Maximum likelihood logistic regression with offsets and observation weights.

    ``responses`` may be fractional but must lie in [0, 1].  ``design`` may be
    ``None`` (or have zero columns) for an intercept-only model.
    """
    spec = spec or GlmSpec()
    y, X, off, w = _validate(responses, design, offsets, weights, spec, bounded=True)
    return _newton(y, X, off, w, spec)


def scaled_logistic_fit(responses_scaled, design=None, offsets=None, weights=None, spec: GlmSpec | None = None) -> GlmFit:
    """Minimize the logistic loss for responses that may leave [0, 1].

    Used when the outcome has been mapped onto the unit interval through
    user-supplied bounds on the outcome regression; observed values beyond
    those bounds land outside [0, 1].  With all responses in [0, 1] the result
    is the same as :func:`fit_glm_logistic`.
    """
    spec = spec or GlmSpec()
    y, X, off, w = _validate(responses_scaled, design, offsets, weights, spec, bounded=False)
    return _newton(y, X, off, w, spec)


def clip_propensity(raw, lower: float = 0.05, upper: float = 0.5):
    """``min(max(raw, lower), upper)``; scalars stay scalars."""
    if not (0.0 <= lower < upper <= 1.0):
        raise ValueError(f"invalid clip interval [{lower}, {upper}]")
    out = np.clip(raw, lower, upper)
    return float(out) if np.ndim(out) == 0 else out
