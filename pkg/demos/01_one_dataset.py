"""Every estimator on a single simulated dataset.

Draws one sample of size 300 from the rare-outcome DGP, fits the cross-fitted
nuisances once and hands the same fit to each estimator.  Run with

    python3 demos/01_one_dataset.py [seed]
"""
import sys

import numpy as np

from crossfit_att import (
    BASE_KINDS,
    DgpSpec,
    LearnerConfig,
    RngStream,
    compute_truth,
    estimate,
    fit_nuisances,
    make_fold_plan,
    sample_dgp,
)
from crossfit_att.diagnostics import diagnose

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 11

spec = DgpSpec(300)
truth = compute_truth(spec, mc_draws=0)
rng = RngStream(seed)
data = sample_dgp(spec, rng.child(0))
print(f"n={data.n}  treated={int(data.a.sum())}  control cases={int(data.y.sum())}")
print(f"true psi = {truth.psi_true:.5f}")

# two folds, as in the small-sample experiments
plan = make_fold_plan(data.n, 2, rng.child(1))
nuisance = fit_nuisances(data, plan, LearnerConfig(), rng.child(2))
print("outcome learners:", nuisance.meta["q_learners"])
print("propensity learners:", nuisance.meta["g_learners"])
for v in range(2):
    idx = plan.in_fold(v)
    controls = idx[data.a[idx] == 0]
    print(f"  fold {v}: pi={nuisance.pi_folds[v]:.3f}  cases among in-fold controls={int(data.y[controls].sum())}"
          f"  min Q={nuisance.q[idx].min():.2e}")

print()
print(f"{'estimator':10s} {'psi':>9s} {'95% CI':>22s}  diagnostics")
for kind in BASE_KINDS:
    rep = estimate(kind, data, plan, nuisance)
    ci = rep.psi_ci
    note = ""
    if rep.fluctuations:
        diag = diagnose(rep)
        note = f"max|eps|={diag.max_abs_epsilon:.3g}  MRAD={diag.mrad:.3g}" + ("  FLAGGED" if diag.flagged else "")
    print(f"{kind:10s} {rep.psi_hat:9.5f} [{ci.lower:9.5f}, {ci.upper:9.5f}]  {note}")

# the treated never have the outcome here, so theta is just -psi
rep = estimate("dml", data, plan, nuisance)
assert np.isclose(rep.theta_hat, -rep.psi_hat)
