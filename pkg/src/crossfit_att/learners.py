"""Regression learners for nuisance functions and a discrete super learner.

All learners map covariates to predictions in [0, 1] and are trained with the
logistic (cross-entropy) loss.  Passing ``scaled=True`` trains on a response
that has been affinely rescaled and may leave the unit interval; only learners
whose fitting criterion stays meaningful under that loss accept it
(``knn_smoother`` does not).

Any learner given a constant response returns that constant exactly (clipped
to [0, 1]).  This matters for rare outcomes: a training fold without cases
yields an outcome regression that is identically zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import RngStream, make_fold_plan
from .errors import LearnerTrainingError
from .glm import GlmSpec, fit_glm_logistic, scaled_logistic_fit

logger = logging.getLogger(__name__)

LEARNER_KINDS = ("logistic_main_terms", "boosted_stumps", "knn_smoother", "constant_rate")
SCALED_KINDS = ("logistic_main_terms", "boosted_stumps", "constant_rate")

_DEFAULTS = {
    "logistic_main_terms": {},
    "boosted_stumps": {"n_trees": 50, "max_depth": 1, "learning_rate": 0.1, "reg_lambda": 1.0},
    "knn_smoother": {"k": 25},
    "constant_rate": {},
}

LOSS_CLIP = 1e-12


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {LEARNER_KINDS}")
        unknown = set(self.hyperparameters) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        params = {**_DEFAULTS[self.kind], **self.hyperparameters}
        for key, value in params.items():
            if not value > 0:
                raise ValueError(f"{self.kind}: {key} must be positive, got {value}")
        for key in ("n_trees", "max_depth", "k"):
            if key in params and int(params[key]) != params[key]:
                raise ValueError(f"{self.kind}: {key} must be an integer")
        object.__setattr__(self, "hyperparameters", params)

    @property
    def name(self) -> str:
        if not self.hyperparameters:
            return self.kind
        args = ",".join(f"{k}={v}" for k, v in sorted(self.hyperparameters.items()))
        return f"{self.kind}({args})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters)}


def default_library() -> list[LearnerSpec]:
    return [
        LearnerSpec("logistic_main_terms"),
        LearnerSpec("boosted_stumps", {"n_trees": 50, "learning_rate": 0.1}),
        LearnerSpec("boosted_stumps", {"n_trees": 30, "max_depth": 2, "learning_rate": 0.1}),
        LearnerSpec("knn_smoother", {"k": 25}),
        LearnerSpec("constant_rate"),
    ]


class FittedRegressor:
    """Fitted map from covariates to [0, 1]."""

    name = "regressor"

    def predict(self, covariates) -> np.ndarray:
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return np.clip(self._predict(x), 0.0, 1.0)

    def _predict(self, x):
        raise NotImplementedError


class ConstantRegressor(FittedRegressor):
    def __init__(self, value):
        self.value = float(np.clip(value, 0.0, 1.0))
        self.name = "constant_rate"

    def _predict(self, x):
        return np.full(x.shape[0], self.value)


class LogisticRegressor(FittedRegressor):
    def __init__(self, fit):
        self.fit = fit
        self.name = "logistic_main_terms"

    def _predict(self, x):
        return self.fit.predict(x)


class ClippedRegressor(FittedRegressor):
    """Wraps another regressor and clips its predictions to ``[lower, upper]``."""

    def __init__(self, base: FittedRegressor, lower: float, upper: float):
        if not (0.0 <= lower < upper <= 1.0):
            raise ValueError(f"invalid clip interval [{lower}, {upper}]")
        self.base, self.lower, self.upper = base, lower, upper
        self.name = f"clip[{lower},{upper}]({base.name})"

    def predict(self, covariates):
        return np.clip(self.base.predict(covariates), self.lower, self.upper)


@dataclass
class _Node:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None


def _best_split(x, g, h, orders, lam, min_child_weight):
    # orders: (d, m) row indices of this node, row j sorted by feature j
    d = orders.shape[0]
    rows = orders[0]
    G, H = g[rows].sum(), h[rows].sum()
    xs = x[orders, np.arange(d)[:, None]]
    gl = np.cumsum(g[orders], axis=1)[:, :-1]
    hl = np.cumsum(h[orders], axis=1)[:, :-1]
    gr, hr = G - gl, H - hl
    ok = (xs[:, 1:] > xs[:, :-1]) & (hl >= min_child_weight) & (hr >= min_child_weight)
    if not ok.any():
        return 0.0, -1, 0.0
    gain = np.where(ok, gl * gl / (hl + lam) + gr * gr / (hr + lam), -np.inf) - G * G / (H + lam)
    j, k = np.unravel_index(int(np.argmax(gain)), gain.shape)
    if not gain[j, k] > 1e-12:
        return 0.0, -1, 0.0
    return float(gain[j, k]), int(j), 0.5 * (xs[j, k] + xs[j, k + 1])


def _grow(x, g, h, orders, depth, lam, min_child_weight, fitted) -> _Node:
    rows = orders[0]
    node = _Node(value=float(g[rows].sum() / (h[rows].sum() + lam)))
    fitted[rows] = node.value
    if depth == 0 or rows.size < 2:
        return node
    gain, j, thr = _best_split(x, g, h, orders, lam, min_child_weight)
    if j < 0:
        return node
    node.feature, node.threshold = j, thr
    goes_left = (x[:, j] <= thr)[orders]
    m_left = int(goes_left[0].sum())
    left = orders[goes_left].reshape(orders.shape[0], m_left)
    right = orders[~goes_left].reshape(orders.shape[0], rows.size - m_left)
    node.left = _grow(x, g, h, left, depth - 1, lam, min_child_weight, fitted)
    node.right = _grow(x, g, h, right, depth - 1, lam, min_child_weight, fitted)
    return node


def _tree_predict(node: _Node, x: np.ndarray) -> np.ndarray:
    if node.feature < 0:
        return np.full(x.shape[0], node.value)
    out = np.empty(x.shape[0])
    mask = x[:, node.feature] <= node.threshold
    out[mask] = _tree_predict(node.left, x[mask])
    out[~mask] = _tree_predict(node.right, x[~mask])
    return out


class BoostedTreesRegressor(FittedRegressor):
    def __init__(self, base_score, trees, learning_rate):
        self.base_score, self.trees, self.learning_rate = base_score, trees, learning_rate
        self.name = "boosted_stumps"

    def _predict(self, x):
        f = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            f += self.learning_rate * _tree_predict(tree, x)
        return expit(f)


def _fit_boosted(x, y, params) -> BoostedTreesRegressor:
    # second-order (Newton) boosting of the logistic loss on the logit scale
    lam = float(params["reg_lambda"])
    lr = float(params["learning_rate"])
    depth = int(params["max_depth"])
    mean = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = float(logit(mean))
    f = np.full(y.shape[0], base)
    trees = []
    orders = np.argsort(x, axis=0, kind="stable").T
    fitted = np.empty(y.shape[0])
    for _ in range(int(params["n_trees"])):
        p = expit(f)
        g = y - p
        h = p * (1.0 - p)
        # leaves overwrite their parents' values, so ``fitted`` ends as the tree's training prediction
        trees.append(_grow(x, g, h, orders, depth, lam, 1e-3, fitted))
        f += lr * fitted
    return BoostedTreesRegressor(base, trees, lr)


class KnnRegressor(FittedRegressor):
    def __init__(self, x, y, k):
        self.x, self.y, self.k = x, y, k
        self.name = "knn_smoother"

    def _predict(self, x):
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], 512):
            block = x[start : start + 512]
            d2 = ((block[:, None, :] - self.x[None, :, :]) ** 2).sum(axis=2)
            if self.k < self.x.shape[0]:
                nearest = np.argpartition(d2, self.k - 1, axis=1)[:, : self.k]
            else:
                nearest = np.broadcast_to(np.arange(self.x.shape[0]), d2.shape)
            out[start : start + 512] = self.y[nearest].mean(axis=1)
        return out


def fit_learner(spec: LearnerSpec, covariates, responses, rng: RngStream | None = None, scaled: bool = False) -> FittedRegressor:
    """Train one learner.

    ``rng`` is accepted for the uniform learner interface; the built-in
    learners are deterministic.  Raises :class:`LearnerTrainingError` when the
    data are too small for the learner.
    """
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(responses, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("covariates and responses differ in length")
    if y.shape[0] < 2:
        raise LearnerTrainingError(f"{spec.name}: need at least 2 observations, got {y.shape[0]}")
    if not scaled and (np.any(y < 0) or np.any(y > 1)):
        raise ValueError("responses must lie in [0, 1]")
    if scaled and spec.kind not in SCALED_KINDS:
        raise LearnerTrainingError(f"{spec.kind} cannot be trained under the scaled logistic loss")
    params = spec.hyperparameters
    if spec.kind == "knn_smoother" and int(params["k"]) > y.shape[0]:
        raise LearnerTrainingError(f"knn_smoother: k={params['k']} exceeds {y.shape[0]} observations")
    if np.ptp(y) == 0.0 or spec.kind == "constant_rate":
        return ConstantRegressor(y.mean())

    if spec.kind == "logistic_main_terms":
        fitter = scaled_logistic_fit if scaled else fit_glm_logistic
        try:
            fit = fitter(y, x, spec=GlmSpec(include_intercept=True))
        except ValueError as exc:
            raise LearnerTrainingError(f"logistic_main_terms: {exc}") from exc
        return LogisticRegressor(fit)
    if spec.kind == "boosted_stumps":
        return _fit_boosted(x, y, params)
    return KnnRegressor(x.copy(), y.copy(), int(params["k"]))


def log_loss(responses, predictions) -> float:
    """Mean cross-entropy with predictions clipped to ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(responses, dtype=float)
    p = np.clip(np.asarray(predictions, dtype=float), LOSS_CLIP, 1.0 - LOSS_CLIP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


class SuperLearnerFit(FittedRegressor):
    """Discrete super learner: the CV-selected candidate refit on all data."""

    def __init__(self, selected: FittedRegressor, index: int, specs, cv_losses, warnings):
        self.selected = selected
        self.selected_index = index
        self.specs = list(specs)
        self.cv_losses = cv_losses
        self.warnings = warnings
        self.name = specs[index].name

    def predict(self, covariates):
        return self.selected.predict(covariates)


def discrete_super_learner(
    specs: Sequence[LearnerSpec],
    covariates,
    responses,
    v_cv: int = 5,
    rng: RngStream | None = None,
    scaled: bool = False,
) -> SuperLearnerFit:
    """Select the candidate with the smallest ``v_cv``-fold cross-validated log-loss.

    Ties go to the lowest index.  A candidate that fails to train in any CV
    fold is skipped and the reason is kept in ``warnings``; if every candidate
    fails, :class:`LearnerTrainingError` is raised.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one candidate learner")
    rng = rng or RngStream(0)
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(responses, dtype=float)
    n = y.shape[0]
    losses = np.full(len(specs), np.inf)
    warnings: list[str] = []

    if len(specs) == 1:
        losses[0] = np.nan
    else:
        plan = make_fold_plan(n, v_cv, rng.child(0))
        for i, spec in enumerate(specs):
            pred = np.empty(n)
            try:
                for v in range(v_cv):
                    test, train = plan.in_fold(v), plan.out_of_fold(v)
                    model = fit_learner(spec, x[train], y[train], rng.child(1, i, v), scaled=scaled)
                    pred[test] = model.predict(x[test])
            except LearnerTrainingError as exc:
                warnings.append(f"candidate {i} ({spec.name}) skipped: {exc}")
                logger.debug("super learner candidate %s skipped: %s", spec.name, exc)
                continue
            losses[i] = log_loss(y, pred)
        if not np.any(np.isfinite(losses)):
            raise LearnerTrainingError("every candidate learner failed to train: " + "; ".join(warnings))

    order = [i for i in range(len(specs)) if not np.isinf(losses[i])]
    best = min(order, key=lambda i: (0.0 if np.isnan(losses[i]) else losses[i], i))
    try:
        model = fit_learner(specs[best], x, y, rng.child(2, best), scaled=scaled)
    except LearnerTrainingError:
        if len(specs) > 1:
            raise
        raise LearnerTrainingError(f"single candidate {specs[0].name} failed to train") from None
    return SuperLearnerFit(model, best, specs, losses, warnings)
