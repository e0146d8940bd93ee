"""What a fluctuation does to an outcome regression that is exactly zero.

With a rare outcome, the controls outside a fold can contain no cases at all.
Every learner then returns the constant 0, the logit offset sits at the clip
bound of -1e4, and a fold that does contain a case forces the fluctuation
coefficient to be enormous.  This script searches for such a fold and prints
the before/after predictions for the two fold-wise TMLEs.
"""
import numpy as np

from crossfit_att import DgpSpec, LearnerConfig, RngStream, estimate_tmle, fit_nuisances, make_fold_plan, sample_dgp

spec = DgpSpec(300)
for seed in range(200):
    rng = RngStream(seed)
    data = sample_dgp(spec, rng.child(0))
    plan = make_fold_plan(data.n, 2, rng.child(1))
    nuisance = fit_nuisances(data, plan, LearnerConfig(), rng.child(2))
    zero_folds = [v for v in range(2) if np.all(nuisance.q[plan.in_fold(v)] == 0)]
    hit = [v for v in zero_folds if data.y[plan.in_fold(v)].any()]
    if hit:
        break
v = hit[0]
idx = plan.in_fold(v)
print(f"seed {seed}: fold {v} has Q == 0 everywhere but {int(data.y[idx].sum())} in-fold case(s)")

for variant in ("c", "w"):
    rep = estimate_tmle(data, plan, nuisance, variant)
    rec = rep.fluctuations[v]
    q_star = rep.q_pairs[idx, 1]
    treated = data.a[idx] == 1
    print(f"\ntmle_{variant}: eps={rec.epsilon:.1f}  converged={rec.converged}")
    print(f"  targeted Q on in-fold controls: max {q_star[~treated].max():.3g}, mean {q_star[~treated].mean():.3g}")
    print(f"  targeted Q on in-fold treated:  max {q_star[treated].max():.3g}, mean {q_star[treated].mean():.3g}")
    print(f"  fold estimate {rep.fold_psi[v]:.5f}   overall psi {rep.psi_hat:.5f}   MRAD {rep.mrad:.3g}")

# the weighted fluctuation shifts every prediction by one constant, so on a
# constant-zero fold the targeted value is the same for all observations
