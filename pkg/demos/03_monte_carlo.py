"""A scaled-down Monte Carlo comparison at n=300 and n=2000.

The acceptance suite runs 200 repetitions per sample size.  This demo
defaults to 40 so it finishes in about a minute; pass a different count as
the first argument.  It prints bias, MSE and coverage for theta, then
repeats the n=300 summary after dropping every repetition where some TMLE
fluctuation exceeded 10 in absolute value.
"""
import os
import sys

from crossfit_att import DgpSpec, SimulationConfig, compute_truth, run_monte_carlo, summarize
from crossfit_att.simulation import fraction_large_epsilon

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 40
workers = os.cpu_count() or 1


def show(summary):
    print(f"  {'estimator':9s} {'bias x1e4':>10s} {'MSE x1e5':>9s} {'coverage':>9s} {'median psi':>11s} {'psi<0':>6s}")
    for k, s in summary.estimators.items():
        print(f"  {k:9s} {s.bias * 1e4:10.2f} {s.mse * 1e5:9.3f} {s.ci_coverage:9.3f} {s.psi_median:11.5f} {s.negative_proportion:6.1%}")


for n in (300, 2000):
    config = SimulationConfig(DgpSpec(n))
    truth = compute_truth(config.dgp, mc_draws=0)
    results = run_monte_carlo(config, reps, master_seed=7, truth=truth, workers=workers)
    print(f"\nn={n}, {reps} repetitions, truth psi={truth.psi_true:.5f}")
    show(summarize(results, truth))
    print(f"  repetitions with some |eps| > 10: {fraction_large_epsilon(results):.0%}")
    if n == 300:
        filtered = summarize(results, truth, "epsilon:10", "run_level")
        kept = next(iter(filtered.estimators.values())).reps_used
        print(f"\n  after dropping flagged repetitions ({kept} kept):")
        show(filtered)
