import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossfit_att.errors import RankDeficiencyError
from crossfit_att.glm import (
    ConvergenceError,
    GlmSpec,
    clip_propensity,
    fit_glm_logistic,
    logistic_loglik,
    logistic_score,
    scaled_logistic_fit,
)

from oracles import coordinate_ascent_mle, loglik


def test_balanced_intercept_only_is_zero():
    fit = fit_glm_logistic([1, 0, 1, 0])
    assert fit.converged
    assert abs(fit.intercept) < 1e-12


def test_offset_is_absorbed_by_intercept():
    fit = fit_glm_logistic([1, 0, 1, 0], offsets=np.ones(4))
    assert fit.intercept == pytest.approx(-1.0, abs=1e-8)


def test_all_ones_diverges_upward_without_raising():
    fit = fit_glm_logistic(np.ones(5))
    assert fit.diverged and not fit.converged
    assert fit.intercept > 30


def test_all_ones_raises_when_divergence_not_allowed():
    with pytest.raises(ConvergenceError):
        fit_glm_logistic(np.ones(5), spec=GlmSpec(allow_divergence=False))


def test_separated_slope_is_flagged():
    x = np.array([-2.0, -1.0, 1.0, 2.0])
    fit = fit_glm_logistic([0, 0, 1, 1], x)
    assert fit.diverged
    assert fit.slopes[0] > 5


def test_huge_negative_offset_gives_large_but_finite_slope():
    # the situation of a constant-zero initial regression being fluctuated
    y = np.array([1.0, 0.0, 0.0, 0.0])
    off = np.full(4, -1e4)
    h = np.array([2.5, 2.4, 2.3, 2.45])
    fit = fit_glm_logistic(y, h, off, spec=GlmSpec(include_intercept=False))
    assert fit.converged
    assert fit.coefficients[0] > 1e3
    mu = fit.predict(h, off)
    assert abs(np.sum(h * (y - mu))) / 4 < 1e-10


def test_weight_zero_rows_are_ignored():
    y = np.array([1, 0, 1, 1, 0], dtype=float)
    x = np.array([0.3, -0.2, 0.5, 0.1, 9.0])
    full = fit_glm_logistic(y[:4], x[:4])
    masked = fit_glm_logistic(y, x, weights=[1, 1, 1, 1, 0])
    np.testing.assert_allclose(full.coefficients, masked.coefficients, atol=1e-10)


def test_rank_deficiency():
    with pytest.raises(RankDeficiencyError):
        fit_glm_logistic([1.0, 0.0], np.array([[1.0, 2.0], [3.0, 4.0]]))


def test_input_validation():
    with pytest.raises(ValueError):
        fit_glm_logistic([0.5, 1.2])
    with pytest.raises(ValueError):
        fit_glm_logistic([0.0, 1.0], weights=[-1.0, 1.0])
    with pytest.raises(ValueError):
        fit_glm_logistic([0.0, 1.0], weights=[0.0, 0.0])
    with pytest.raises(ValueError):
        fit_glm_logistic([0.0, 1.0], spec=GlmSpec(include_intercept=False))


def test_scaled_fit_accepts_out_of_range_responses():
    y = np.array([1.4, 0.0, 0.2, 0.0])
    fit = scaled_logistic_fit(y)
    assert fit.converged
    # intercept-only optimum: expit(b) equals the mean response
    assert 1 / (1 + np.exp(-fit.intercept)) == pytest.approx(y.mean(), abs=1e-10)


def test_scaled_fit_mean_above_one_diverges():
    fit = scaled_logistic_fit([1.2, 1.2])
    assert fit.diverged


def test_scaled_matches_plain_on_unit_responses():
    gen = np.random.default_rng(3)
    x = gen.normal(size=(30, 2))
    y = (gen.random(30) < 0.4).astype(float)
    a = fit_glm_logistic(y, x)
    b = scaled_logistic_fit(y, x)
    np.testing.assert_array_equal(a.coefficients, b.coefficients)


@given(c=st.floats(0.01, 100.0), seed=st.integers(0, 10_000))
def test_uniform_weight_scaling_leaves_coefficients_unchanged(c, seed):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(25, 2))
    y = gen.random(25)
    w = gen.uniform(0.2, 2.0, 25)
    a = fit_glm_logistic(y, x, weights=w)
    b = fit_glm_logistic(y, x, weights=c * w)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-8)


@given(seed=st.integers(0, 10_000))
def test_score_matches_finite_differences(seed):
    gen = np.random.default_rng(seed)
    n, p = int(gen.integers(5, 40)), int(gen.integers(1, 4))
    x = gen.normal(size=(n, p))
    y = gen.random(n)
    off = gen.normal(size=n)
    w = gen.uniform(0.1, 3.0, n)
    beta = gen.normal(size=p + 1)
    analytic = logistic_score(beta, y, x, off, w)
    h = 1e-6
    numeric = np.array(
        [
            (logistic_loglik(beta + h * e, y, x, off, w) - logistic_loglik(beta - h * e, y, x, off, w)) / (2 * h)
            for e in np.eye(p + 1)
        ]
    )
    scale = np.maximum(np.abs(analytic), 1.0)
    assert np.all(np.abs(analytic - numeric) / scale < 1e-5)


def test_loglik_agrees_with_independent_formula():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(20, 2))
    y = gen.random(20)
    beta = np.array([0.3, -1.0, 2.0])
    X = np.column_stack([np.ones(20), x])
    assert logistic_loglik(beta, y, x) == pytest.approx(loglik(beta, X, y), rel=1e-12)


def random_glm_instance(gen, mode):
    """One random problem in the given mode; returns (fit kwargs, oracle design)."""
    n = int(gen.integers(12, 51))
    p = int(gen.integers(1, 4))
    x = gen.normal(size=(n, p))
    beta = gen.normal(scale=0.8, size=p + 1)
    off = gen.normal(scale=0.5, size=n) if mode in ("offset", "intercept_only") else None
    w = gen.uniform(0.2, 3.0, size=n) if mode == "weight" else None
    eta = beta[0] + x @ beta[1:] + (0 if off is None else off)
    if gen.random() < 0.5:
        y = (gen.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = np.clip(1 / (1 + np.exp(-eta)) + gen.normal(scale=0.1, size=n), 0, 1)
    if mode == "intercept_only":
        return dict(responses=y, design=None, offsets=off), np.ones((n, 1)), off, w
    if mode == "no_intercept":
        return dict(responses=y, design=x, spec=GlmSpec(include_intercept=False)), x, off, w
    X = np.column_stack([np.ones(n), x])
    return dict(responses=y, design=x, offsets=off, weights=w), X, off, w


def glm_oracle_trials(count=100, seed=2024):
    """Compare the fitter with the coordinate-ascent oracle on ``count`` solvable instances.

    Returns the largest coefficient error and the number of instances used.
    """
    gen = np.random.default_rng(seed)
    modes = ("plain", "offset", "weight", "no_intercept", "intercept_only")
    worst, used, i = 0.0, 0, 0
    while used < count:
        mode = modes[i % len(modes)]
        i += 1
        kwargs, X, off, w = random_glm_instance(gen, mode)
        ref = coordinate_ascent_mle(X, kwargs["responses"], off, w)
        if ref is None:
            continue  # MLE does not exist
        fit = fit_glm_logistic(**kwargs)
        assert fit.converged, f"instance {i} ({mode}) did not converge"
        worst = max(worst, float(np.max(np.abs(fit.coefficients - ref))))
        used += 1
    return worst, used


def test_oracle_equivalence_on_random_instances():
    worst, used = glm_oracle_trials(100)
    assert used == 100
    assert worst < 1e-6


def test_clip_propensity():
    assert clip_propensity(0.7) == 0.5
    assert clip_propensity(0.01) == 0.05
    assert clip_propensity(0.2) == 0.2
    np.testing.assert_array_equal(clip_propensity(np.array([0.0, 0.3, 1.0])), [0.05, 0.3, 0.5])
    with pytest.raises(ValueError):
        clip_propensity(0.3, 0.5, 0.05)
