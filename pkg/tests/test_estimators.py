import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossfit_att import (
    Dataset,
    FoldPlan,
    LearnerConfig,
    LearnerSpec,
    RngStream,
    estimate,
    estimate_att,
    estimate_bounded_tmle,
    estimate_dml,
    estimate_naive,
    estimate_tmle,
    fit_bounded_nuisances,
    fit_nuisances,
    make_fold_plan,
)
from crossfit_att.errors import DegenerateEstimationError, TargetingDegenerateError
from crossfit_att.estimators import BASE_KINDS, estimator_label

from builders import array_nuisance, random_problem

FAST = LearnerConfig(
    q_library=(LearnerSpec("logistic_main_terms"), LearnerSpec("constant_rate")),
    g_library=(LearnerSpec("logistic_main_terms"), LearnerSpec("constant_rate")),
)


def expit(z):
    return 1 / (1 + np.exp(-z))


# --- hand examples ---------------------------------------------------------


def two_obs_fold(q_control, g_control, pi, y_control=0.0):
    data = Dataset(np.zeros((4, 1)), [1, 0, 1, 0], [0.0, y_control, 0.0, y_control])
    plan = FoldPlan(2, [0, 0, 1, 1])
    q = [0.4, q_control, 0.4, q_control]
    g = [0.3, g_control, 0.3, g_control]
    return data, plan, array_nuisance(plan, q, g, [pi, pi], bounds=(0.05, 0.9))


def test_dml_hand_example():
    data, plan, nf = two_obs_fold(0.2, 0.5, 0.5)
    rep = estimate_dml(data, plan, nf)
    assert rep.psi_hat == pytest.approx(0.2)
    np.testing.assert_allclose(rep.fold_psi, [0.2, 0.2])


def test_dml_adversarial_example_leaves_unit_interval():
    data, plan, nf = two_obs_fold(0.9, 0.8, 0.2)
    rep = estimate_dml(data, plan, nf)
    assert rep.psi_hat == pytest.approx(-8.6)
    clipped = estimate_dml(data, plan, nf, clip_to_unit=True)
    assert clipped.psi_hat == 0.0
    assert clipped.psi_ci.estimate == 0.0
    assert clipped.psi_ci.standard_error > 0


def test_naive_constant_and_single_treated():
    gen = np.random.default_rng(0)
    data, plan, nf = random_problem(gen)
    const = array_nuisance(plan, np.full(data.n, 0.37), nf.g, nf.pi_folds)
    assert estimate_naive(data, plan, const).psi_hat == pytest.approx(0.37)
    d2, p2, n2 = two_obs_fold(0.2, 0.5, 0.5)
    assert estimate_naive(d2, p2, n2).psi_hat == pytest.approx(0.4)


@given(seed=st.integers(0, 10_000))
def test_naive_matches_resummation(seed):
    gen = np.random.default_rng(seed)
    data, plan, nf = random_problem(gen, v=int(gen.integers(2, 4)))
    total = 0.0
    for v in range(plan.v_count):
        idx = plan.in_fold(v)
        t = [i for i in idx if data.a[i] == 1]
        total += len(idx) * sum(nf.q[i] for i in t) / len(t)
    assert estimate_naive(data, plan, nf).psi_hat == pytest.approx(total / data.n, rel=1e-12, abs=1e-15)


def test_att_examples():
    data, plan, nf = two_obs_fold(0.2, 0.5, 0.5)
    rep = estimate_dml(data, plan, nf)
    assert rep.theta_hat == pytest.approx(-rep.psi_hat)
    assert rep.theta_ci.lower == pytest.approx(-rep.psi_ci.upper)
    treated_y = Dataset(np.zeros((4, 1)), [1, 0, 1, 0], [0.3, 0.0, 0.3, 0.0])
    zero = estimate_dml(treated_y, plan, array_nuisance(plan, [0.0] * 4, [0.3] * 4, [0.5, 0.5]))
    assert zero.psi_hat == 0.0 and zero.theta_hat == pytest.approx(0.3)
    theta, _ = estimate_att(treated_y, zero)
    assert theta == pytest.approx(0.3)


# --- targeting -------------------------------------------------------------


def test_zero_score_gives_zero_fluctuation():
    # control residuals cancel: H (y - q) sums to zero in each fold
    data = Dataset(np.zeros((6, 1)), [1, 0, 0, 1, 0, 0], [0, 1, 0, 0, 1, 0])
    plan = FoldPlan(2, [0, 0, 0, 1, 1, 1])
    nf = array_nuisance(plan, [0.3, 0.5, 0.5, 0.3, 0.5, 0.5], [0.2] * 6, [1 / 3, 1 / 3])
    for variant in ("c", "w", "cp", "wp"):
        rep = estimate_tmle(data, plan, nf, variant)
        assert all(abs(f.epsilon) < 1e-10 for f in rep.fluctuations)
        assert rep.psi_hat == pytest.approx(estimate_naive(data, plan, nf).psi_hat, abs=1e-10)


def test_weight_scaling_leaves_weighted_fluctuation_unchanged():
    gen = np.random.default_rng(5)
    data, plan, nf = random_problem(gen, n=50)
    a = estimate_tmle(data, plan, nf, "w")
    # halving every treated fraction doubles every weight
    doubled = array_nuisance(plan, nf.q, nf.g, nf.pi_folds / 2)
    b = estimate_tmle(data, plan, doubled, "w")
    np.testing.assert_allclose([f.epsilon for f in a.fluctuations], [f.epsilon for f in b.fluctuations], atol=1e-8)


def test_all_control_outcomes_zero_drive_estimate_to_zero():
    gen = np.random.default_rng(6)
    data, plan, nf = random_problem(gen, n=40)
    data = Dataset(data.x, data.a, np.zeros(data.n))
    nf = array_nuisance(plan, np.full(data.n, 0.2), nf.g, nf.pi_folds)
    for variant in ("c", "w"):
        rep = estimate_tmle(data, plan, nf, variant)
        assert all(f.epsilon < -20 and f.diverged for f in rep.fluctuations)
        assert rep.psi_hat < 1e-8


def test_single_case_control_diverges_upward():
    data = Dataset(np.zeros((4, 1)), [1, 0, 1, 0], [0, 1, 0, 1])
    plan = FoldPlan(2, [0, 0, 1, 1])
    nf = array_nuisance(plan, [0.5] * 4, [1 / 3] * 4, [0.5, 0.5])
    rep = estimate_tmle(data, plan, nf, "c")
    assert all(f.epsilon > 20 and f.diverged for f in rep.fluctuations)


def test_identical_folds_make_pooled_equal_foldwise():
    gen = np.random.default_rng(7)
    half, plan_half, nf_half = random_problem(gen, n=30, v=2)
    idx0 = plan_half.in_fold(0)
    x = np.vstack([half.x[idx0]] * 2)
    a = np.concatenate([half.a[idx0]] * 2)
    y = np.concatenate([half.y[idx0]] * 2)
    m = idx0.size
    data = Dataset(x, a, y)
    plan = FoldPlan(2, np.repeat([0, 1], m))
    nf = array_nuisance(plan, np.tile(nf_half.q[idx0], 2), np.tile(nf_half.g[idx0], 2), [nf_half.pi_folds[0]] * 2)
    for fold_v, pooled_v in (("c", "cp"), ("w", "wp")):
        f = estimate_tmle(data, plan, nf, fold_v)
        p = estimate_tmle(data, plan, nf, pooled_v)
        assert f.fluctuations[0].epsilon == pytest.approx(p.fluctuations[0].epsilon, rel=1e-7, abs=1e-9)
        assert f.psi_hat == pytest.approx(p.psi_hat, rel=1e-7, abs=1e-12)


def test_record_shapes():
    gen = np.random.default_rng(8)
    data, plan, nf = random_problem(gen, v=3, n=60)
    assert len(estimate_tmle(data, plan, nf, "c").fluctuations) == 3
    pooled = estimate_tmle(data, plan, nf, "wp").fluctuations
    assert len(pooled) == 1 and pooled[0].fold == "pooled" and pooled[0].targeting_mode == "weighted"
    assert estimate_dml(data, plan, nf).fluctuations == ()


def test_bounds_unit_interval_matches_standard_tmle():
    gen = np.random.default_rng(9)
    data, plan, nf = random_problem(gen, n=50)
    unit = array_nuisance(plan, nf.q, nf.g, nf.pi_folds, q_bounds=(0.0, 1.0))
    for variant in ("c", "w", "cp", "wp"):
        a = estimate_tmle(data, plan, nf, variant)
        b = estimate_tmle(data, plan, unit, variant)
        assert a.psi_hat == b.psi_hat
        assert b.kind == f"tmle_{variant}_trans"


def test_unknown_inputs():
    gen = np.random.default_rng(10)
    data, plan, nf = random_problem(gen)
    with pytest.raises(ValueError):
        estimate_tmle(data, plan, nf, "z")
    with pytest.raises(ValueError):
        estimate("tmle_c_trans", data, plan, nf)
    with pytest.raises(ValueError):
        estimate("bogus", data, plan, nf)
    assert estimator_label("tmle_c_trans", (0.0, 0.05)) == "tmle_c_trans[0,0.05]"


def test_targeting_needs_controls():
    data = Dataset(np.zeros((4, 1)), [1, 1, 1, 0], [0, 0, 0, 0])
    plan = FoldPlan(2, [0, 0, 1, 1])
    nf = array_nuisance(plan, [0.1] * 4, [0.3] * 4, [1.0, 0.5])
    with pytest.raises(TargetingDegenerateError) as err:
        estimate_tmle(data, plan, nf, "c")
    assert err.value.fold == 0


# --- invariants over random inputs ----------------------------------------


@settings(max_examples=150)
@given(seed=st.integers(0, 2**31), zero=st.booleans(), v=st.integers(2, 3))
def test_bound_respect_and_residuals(seed, zero, v):
    gen = np.random.default_rng(seed)
    data, plan, nf = random_problem(gen, v=v, zero_q_fold=zero)
    for variant in ("c", "w", "cp", "wp"):
        rep = estimate_tmle(data, plan, nf, variant)
        assert 0.0 <= rep.psi_hat <= 1.0
        if all(f.converged for f in rep.fluctuations):
            assert np.max(np.abs(rep.targeting_residuals)) <= 1e-8
    assert 0.0 <= estimate_naive(data, plan, nf).psi_hat <= 1.0
    dml = estimate_dml(data, plan, nf)
    cl = estimate_dml(data, plan, nf, clip_to_unit=True)
    assert 0.0 <= cl.psi_hat <= 1.0
    if 0.0 <= dml.psi_hat <= 1.0:
        assert cl.psi_hat == dml.psi_hat


@given(seed=st.integers(0, 2**31))
def test_dml_identity_and_fold_eif_mean(seed):
    gen = np.random.default_rng(seed)
    data, plan, nf = random_problem(gen)
    naive = estimate_naive(data, plan, nf)
    dml = estimate_dml(data, plan, nf)
    corr = 0.0
    for v in range(plan.v_count):
        idx = plan.in_fold(v)
        c = [nf.g[i] / (nf.pi[i] * (1 - nf.g[i])) * (data.y[i] - nf.q[i]) for i in idx if data.a[i] == 0]
        corr += sum(c)
        # the fold estimate solves its own estimating equation
        d = np.where(data.a[idx] == 0, nf.g[idx] / (nf.pi[idx] * (1 - nf.g[idx])) * (data.y[idx] - nf.q[idx]),
                     (nf.q[idx] - dml.fold_psi[v]) / nf.pi[idx])
        assert abs(d.mean()) <= 1e-10
    assert dml.psi_hat == pytest.approx(naive.psi_hat + corr / data.n, abs=1e-12)


@given(seed=st.integers(0, 2**31), sign=st.sampled_from([-1, 1]))
def test_monotone_targeting_direction(seed, sign):
    gen = np.random.default_rng(seed)
    data, plan, nf = random_problem(gen)
    q = gen.uniform(0.05, 0.95, data.n)
    y = np.zeros(data.n) if sign < 0 else np.ones(data.n)
    data = Dataset(data.x, data.a, y)
    nf = array_nuisance(plan, q, nf.g, nf.pi_folds)
    for variant in ("c", "w", "cp", "wp"):
        for f in estimate_tmle(data, plan, nf, variant).fluctuations:
            assert np.sign(f.epsilon) == sign


@settings(max_examples=60)
@given(seed=st.integers(0, 2**31), lo=st.floats(0, 0.3), width=st.floats(0.01, 0.7))
def test_bounded_tmle_stays_within_bounds(seed, lo, width):
    gen = np.random.default_rng(seed)
    data, plan, nf = random_problem(gen)
    hi = min(lo + width, 1.0)
    scaled_q = gen.random(data.n)
    bounded = array_nuisance(plan, scaled_q, nf.g, nf.pi_folds, q_bounds=(lo, hi))
    for variant in ("c", "w", "cp", "wp"):
        rep = estimate_tmle(data, plan, bounded, variant)
        assert lo <= rep.psi_hat <= hi
        assert np.all(rep.q_pairs[:, 1] >= lo - 1e-15) and np.all(rep.q_pairs[:, 1] <= hi + 1e-15)


# --- fitted nuisances ------------------------------------------------------


def rare_outcome_case(seed, n=200):
    from crossfit_att import DgpSpec, sample_dgp

    return sample_dgp(DgpSpec(n, outcome_intercept=-2.0), RngStream(seed))


def test_fit_nuisances_contract():
    data = rare_outcome_case(1)
    plan = make_fold_plan(data.n, 2, RngStream(2))
    nf = fit_nuisances(data, plan, FAST, RngStream(3))
    assert np.all((nf.g >= 0.05) & (nf.g <= 0.5))
    for v in range(2):
        idx = plan.in_fold(v)
        assert nf.pi_folds[v] == pytest.approx(data.a[idx].mean())
        np.testing.assert_array_equal(nf.q[idx], nf.q_models[v].predict(data.x[idx]))
        raw = nf.g_models[v].base.predict(data.x[idx])
        np.testing.assert_array_equal(nf.g[idx], np.clip(raw, 0.05, 0.5))
    again = fit_nuisances(data, plan, FAST, RngStream(3))
    np.testing.assert_array_equal(nf.q, again.q)


def test_fit_nuisances_zero_outcomes_give_zero_regression():
    data = rare_outcome_case(4)
    data = Dataset(data.x, data.a, np.zeros(data.n))
    plan = make_fold_plan(data.n, 2, RngStream(0))
    nf = fit_nuisances(data, plan, FAST, RngStream(1))
    assert np.all(nf.q == 0.0)


def test_fold_without_treated_is_degenerate():
    data = Dataset(np.random.default_rng(0).normal(size=(8, 1)), [1, 1, 0, 0, 0, 0, 0, 0], [0] * 8)
    plan = FoldPlan(2, [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(DegenerateEstimationError) as err:
        fit_nuisances(data, plan, FAST)
    assert err.value.fold == 1


def test_bounded_nuisances_share_propensity_and_respect_bounds():
    data = rare_outcome_case(5)
    plan = make_fold_plan(data.n, 2, RngStream(6))
    base = fit_nuisances(data, plan, FAST, RngStream(7))
    bounded = fit_bounded_nuisances(data, plan, (0.0, 0.2), FAST, RngStream(7), base=base)
    np.testing.assert_array_equal(bounded.g, base.g)
    assert np.all((bounded.q_outcome_scale >= 0) & (bounded.q_outcome_scale <= 0.2))
    fresh = fit_bounded_nuisances(data, plan, (0.0, 0.2), FAST, RngStream(7))
    np.testing.assert_array_equal(fresh.g, base.g)
    rep = estimate_bounded_tmle(data, plan, FAST, "c", (0.0, 0.2), RngStream(7), base=base)
    assert 0.0 <= rep.psi_hat <= 0.2
    with pytest.raises(ValueError):
        fit_bounded_nuisances(data, plan, (0.3, 0.1), FAST)


def test_every_kind_runs_end_to_end():
    data = rare_outcome_case(8)
    plan = make_fold_plan(data.n, 2, RngStream(9))
    nf = fit_nuisances(data, plan, FAST, RngStream(10))
    for kind in BASE_KINDS:
        rep = estimate(kind, data, plan, nf)
        assert np.isfinite(rep.psi_hat) and rep.psi_ci.lower <= rep.psi_hat <= rep.psi_ci.upper
        if kind != "dml":
            assert 0.0 <= rep.psi_hat <= 1.0
