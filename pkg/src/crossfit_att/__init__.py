"""Cross-fitted TMLE and DML estimators of the average treatment effect on the treated.

The target is ``psi = E[E[Y | X, A=0] | A=1]``, the mean control outcome among
the treated, and ``theta = E[Y | A=1] - psi``.  The package provides nuisance
learners, four TMLE fluctuation variants, the one-step (DML) estimator, their
influence-function standard errors, fluctuation diagnostics, and a Monte
Carlo engine for a rare-outcome data-generating process.
"""

from .data import Dataset, FoldPlan, Observation, RngStream, make_fold_plan, read_dataset_csv, treated_fraction, write_dataset_csv
from .diagnostics import DiagnosisReport, compute_mrad, diagnose, safe_mrad, write_concordance_csv
from .errors import (
    ConfigError,
    DegenerateEstimationError,
    InvalidSplitError,
    LearnerTrainingError,
    RankDeficiencyError,
    SummaryError,
    TargetingDegenerateError,
)
from .estimators import (
    BASE_KINDS,
    ESTIMATOR_KINDS,
    TRANS_KINDS,
    EstimateReport,
    LearnerConfig,
    estimate,
    estimate_att,
    estimate_bounded_tmle,
    estimate_dml,
    estimate_naive,
    estimate_tmle,
    fit_bounded_nuisances,
    fit_nuisances,
)
from .glm import GlmFit, GlmSpec, clip_propensity, fit_glm_logistic, scaled_logistic_fit
from .inference import NuisanceFit, WaldInterval, eif_standard_error, eif_value, wald_interval
from .learners import LearnerSpec, default_library, discrete_super_learner, fit_learner
from .simulation import (
    DgpSpec,
    MonteCarloSummary,
    SimulationConfig,
    TruthRecord,
    compute_truth,
    run_monte_carlo,
    sample_dgp,
    summarize,
)

__version__ = "0.1.0"
