"""Command-line runner for simulations and single-dataset estimation.

Configuration comes from an optional JSON document; flags override its keys.
Two modes:

``simulate``
    Monte Carlo over the rare-outcome DGP.  Writes ``repetitions.csv``,
    ``summary.json``, ``concordance.csv``, ``epsilon_histogram.csv`` and
    ``mrad.csv`` into ``--out``.
``estimate``
    Reads a CSV (columns ``x1..xd,a,y``), runs the selected estimators once
    and writes ``report.json``.

Every output is written to a temporary file and renamed into place.  On
failure the process exits nonzero and prints one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import RngStream, make_fold_plan, read_dataset_csv
from .diagnostics import CONCORDANCE_COLUMNS, TMLE_KINDS, diagnose
from .errors import ConfigError
from .estimators import (
    BASE_KINDS,
    DEFAULT_LOGIT_CLIP,
    ESTIMATOR_KINDS,
    TRANS_KINDS,
    LearnerConfig,
    estimate,
    fit_bounded_nuisances,
    fit_nuisances,
)
from .learners import LearnerSpec, default_library
from .simulation import (
    DEFAULT_Q_BOUNDS,
    DgpSpec,
    SimulationConfig,
    compute_truth,
    filter_name,
    fraction_large_epsilon,
    run_monte_carlo,
    summarize,
)

SCOPES = {"per-estimator": "per_estimator", "run": "run_level"}
DGP_KEYS = ("treatment_intercept", "treatment_slopes", "outcome_intercept", "outcome_slope_scale", "covariate_range")
HIST_LIMIT = 10.0
HIST_BINS = 40

REPETITION_COLUMNS = (
    "rep_id", "degenerate", "estimator", "kind",
    "psi_hat", "psi_se", "psi_lower", "psi_upper",
    "theta_hat", "theta_se", "theta_lower", "theta_upper",
    "covered", "negative", "max_abs_epsilon", "any_diverged", "mrad", "epsilon_flag", "mrad_flag",
)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "simulate"
    n: int | None = None
    reps: int = 200
    seed: int = 20240229
    folds: int = 2
    estimators: tuple = BASE_KINDS[1:]
    input: str | None = None
    out: str = "results"
    dgp: dict = field(default_factory=dict)
    q_library: tuple = ()
    g_library: tuple = ()
    v_cv: int = 5
    propensity_bounds: tuple = (0.05, 0.5)
    logit_clip: float = DEFAULT_LOGIT_CLIP
    q_bounds: tuple = DEFAULT_Q_BOUNDS
    epsilon_threshold: float = 10.0
    mrad_threshold: float = 10.0
    filter: str = "none"
    filter_scope: str = "run"
    level: float = 0.95
    workers: int = 1

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(
            q_library=self.q_library or tuple(default_library()),
            g_library=self.g_library or tuple(default_library()),
            v_cv=self.v_cv,
            propensity_bounds=self.propensity_bounds,
        )

    def simulation_config(self) -> SimulationConfig:
        return SimulationConfig(
            dgp=DgpSpec(self.n, **self.dgp),
            kinds=self.estimators,
            learners=self.learner_config(),
            v_folds=self.folds,
            logit_clip=self.logit_clip,
            q_bounds=self.q_bounds,
            epsilon_threshold=self.epsilon_threshold,
            mrad_threshold=self.mrad_threshold,
            level=self.level,
        )


def _interval(key, value, lo=-math.inf, hi=math.inf, strict_hi=False):
    try:
        a, b = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a pair of numbers, got {value!r}") from None
    if not (lo <= a < b <= hi) or (strict_hi and b >= hi):
        raise ConfigError(key, f"invalid interval [{a}, {b}]")
    return (a, b)


def _positive_int(key, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(key, f"expected an integer >= {minimum}, got {value!r}")
    return int(value)


def _positive_float(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(key, f"expected a positive number, got {value!r}")
    return float(value)


def _library(key, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a nonempty list of learners")
    specs = []
    for i, item in enumerate(value):
        path = f"{key}[{i}]"
        if isinstance(item, str):
            item = {"kind": item}
        if not isinstance(item, dict):
            raise ConfigError(path, "expected a learner kind or {kind, hyperparameters}")
        extra = set(item) - {"kind", "hyperparameters"}
        if extra:
            raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown key")
        try:
            specs.append(LearnerSpec(item.get("kind"), dict(item.get("hyperparameters", {}))))
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    return tuple(specs)


def _estimators(key, value):
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a nonempty list of estimator kinds")
    for i, kind in enumerate(value):
        if kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"{key}[{i}]", f"unknown estimator kind {kind!r}")
    if len(set(value)) != len(value):
        raise ConfigError(key, "duplicate estimator kinds")
    return tuple(value)


def _dgp(key, value):
    if not isinstance(value, dict):
        raise ConfigError(key, "expected an object")
    for k in value:
        if k not in DGP_KEYS:
            raise ConfigError(f"{key}.{k}", "unknown key")
    out = dict(value)
    if "treatment_slopes" in out:
        slopes = out["treatment_slopes"]
        if not isinstance(slopes, list) or not slopes:
            raise ConfigError(f"{key}.treatment_slopes", "expected a nonempty list")
        out["treatment_slopes"] = tuple(float(s) for s in slopes)
    if "covariate_range" in out:
        out["covariate_range"] = _interval(f"{key}.covariate_range", out["covariate_range"])
    return out


_VALIDATORS = {
    "mode": lambda k, v: v if v in ("simulate", "estimate") else _raise(k, f"expected simulate or estimate, got {v!r}"),
    "n": lambda k, v: _positive_int(k, v, 2),
    "reps": _positive_int,
    "seed": lambda k, v: _positive_int(k, v, 0),
    "folds": lambda k, v: _positive_int(k, v, 2),
    "estimators": _estimators,
    "input": lambda k, v: v if isinstance(v, str) else _raise(k, "expected a path"),
    "out": lambda k, v: v if isinstance(v, str) else _raise(k, "expected a path"),
    "dgp": _dgp,
    "q_library": _library,
    "g_library": _library,
    "v_cv": lambda k, v: _positive_int(k, v, 2),
    "propensity_bounds": lambda k, v: _interval(k, v, 0.0, 1.0, strict_hi=True),
    "logit_clip": _positive_float,
    "q_bounds": lambda k, v: tuple(_interval(f"{k}[{i}]", b, 0.0, 1.0) for i, b in enumerate(v))
    if isinstance(v, list) and v
    else _raise(k, "expected a nonempty list of [l, u] pairs"),
    "epsilon_threshold": _positive_float,
    "mrad_threshold": _positive_float,
    "filter": lambda k, v: _filter(k, v),
    "filter_scope": lambda k, v: v if v in SCOPES else _raise(k, f"expected one of {sorted(SCOPES)}, got {v!r}"),
    "level": lambda k, v: float(v) if isinstance(v, (int, float)) and 0 < v < 1 else _raise(k, "expected a number in (0, 1)"),
    "workers": _positive_int,
}


def _raise(key, msg):
    raise ConfigError(key, msg)


def _filter(key, value):
    try:
        return filter_name(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def parse_config(document: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a config mapping (plus flag overrides) into a :class:`RunConfig`.

    Unknown keys and invalid values raise :class:`ConfigError` naming the key.
    """
    merged = {}
    for source in (document or {}, overrides or {}):
        if not isinstance(source, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        merged.update({k: v for k, v in source.items() if v is not None})
    values = {}
    for key, value in merged.items():
        if key not in _VALIDATORS:
            raise ConfigError(key, "unknown key")
        values[key] = _VALIDATORS[key](key, value)
    config = RunConfig(**values)
    if config.mode == "simulate" and config.n is None:
        raise ConfigError("n", "simulate mode requires n")
    if config.mode == "estimate" and config.input is None:
        raise ConfigError("input", "estimate mode requires an input CSV")
    try:
        config.learner_config()
        if config.mode == "simulate":
            config.simulation_config()
    except ValueError as exc:
        raise ConfigError("<config>", str(exc)) from None
    return config


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    return repr(float(value))


def repetition_rows(results):
    for rep in results:
        if rep.degenerate:
            yield [rep.rep_id, 1] + [""] * (len(REPETITION_COLUMNS) - 2)
            continue
        for label, r in rep.estimators.items():
            yield [
                rep.rep_id, 0, label, r.kind,
                _num(r.psi_hat), _num(r.psi_se), _num(r.psi_lower), _num(r.psi_upper),
                _num(r.theta_hat), _num(r.theta_se), _num(r.theta_lower), _num(r.theta_upper),
                _num(r.covered), _num(r.negative), _num(r.max_abs_epsilon), _num(r.any_diverged),
                _num(r.mrad), _num(r.epsilon_flag), _num(r.mrad_flag),
            ]


def epsilon_histogram(results, limit=HIST_LIMIT, bins=HIST_BINS):
    """Counts of every fold's fluctuation coefficient, clipped to ``[-limit, limit]``."""
    edges = np.linspace(-limit, limit, bins + 1)
    per_label: dict[str, list] = {}
    for rep in results:
        for label, r in rep.estimators.items():
            if r.epsilons:
                per_label.setdefault(label, []).extend(r.epsilons)
    rows = []
    for label, eps in per_label.items():
        counts, _ = np.histogram(np.clip(eps, -limit, limit), bins=edges)
        rows.extend([label, _num(edges[i]), _num(edges[i + 1]), int(c)] for i, c in enumerate(counts))
    return rows


def mrad_rows(results):
    for rep in results:
        for label, r in rep.estimators.items():
            if r.epsilons:
                yield [rep.rep_id, label, _num(r.mrad), _num(r.max_abs_epsilon)]


def concordance_table(results):
    for rep in results:
        for label, folds, pairs in rep.concordance:
            for i, (q0, q1) in enumerate(pairs):
                yield [rep.rep_id, i, int(folds[i]), _num(q0), _num(q1), label]


def summary_document(config: RunConfig, truth, results) -> dict:
    modes = ["none"] + ([config.filter] if config.filter != "none" else [])
    summaries = {}
    for mode in modes:
        summaries[mode] = summarize(results, truth, mode, SCOPES[config.filter_scope]).to_dict()
    return {
        "truth": asdict(truth),
        "n": config.n,
        "reps": config.reps,
        "seed": config.seed,
        "folds": config.folds,
        "fraction_large_epsilon": fraction_large_epsilon(results, config.epsilon_threshold),
        "summaries": summaries,
    }


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_simulate(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = replace(config.simulation_config(), keep_pairs_for=(0,))
    truth = compute_truth(sim.dgp, mc_draws=0)
    results = run_monte_carlo(sim, config.reps, config.seed, truth, workers=config.workers)
    # compute everything first so a late failure leaves no partial set
    files = {
        "repetitions.csv": _csv_text(REPETITION_COLUMNS, repetition_rows(results)),
        "summary.json": _dumps(summary_document(config, truth, results)),
        "concordance.csv": _csv_text(("rep_id", *CONCORDANCE_COLUMNS), concordance_table(results)),
        "epsilon_histogram.csv": _csv_text(("estimator", "bin_lower", "bin_upper", "count"), epsilon_histogram(results)),
        "mrad.csv": _csv_text(("rep_id", "estimator", "mrad", "max_abs_epsilon"), mrad_rows(results)),
    }
    for name, text in files.items():
        atomic_write(out / name, text)
    return out


def _interval_dict(ci):
    return ci.to_dict()


def run_estimate(config: RunConfig) -> Path:
    data = read_dataset_csv(config.input)
    rng = RngStream(config.seed)
    plan = make_fold_plan(data.n, config.folds, rng.child(0))
    learners = config.learner_config()
    nuisance = fit_nuisances(data, plan, learners, rng.child(1))
    reports = [estimate(k, data, plan, nuisance, config.logit_clip, config.level) for k in config.estimators if k in BASE_KINDS]
    trans = [k for k in config.estimators if k in TRANS_KINDS]
    for bounds in config.q_bounds if trans else ():
        bounded = fit_bounded_nuisances(data, plan, bounds, learners, rng.child(1), base=nuisance)
        reports.extend(estimate(k, data, plan, bounded, config.logit_clip, config.level) for k in trans)

    entries = {}
    for r in reports:
        entry = {
            "kind": r.kind,
            "psi": _interval_dict(r.psi_ci),
            "theta": _interval_dict(r.theta_ci),
        }
        if r.kind in TMLE_KINDS or r.kind in TRANS_KINDS:
            diag = diagnose(r, config.epsilon_threshold, config.mrad_threshold)
            entry["fluctuations"] = [asdict(f) for f in r.fluctuations]
            entry["diagnostics"] = {
                "max_abs_epsilon": diag.max_abs_epsilon,
                "epsilon_flag": diag.epsilon_flag,
                "mrad": diag.mrad if math.isfinite(diag.mrad) else None,
                "mrad_flag": diag.mrad_flag,
            }
        entries[r.label] = entry
    doc = {
        "input": str(config.input),
        "n": data.n,
        "treated": int(data.a.sum()),
        "folds": config.folds,
        "seed": config.seed,
        "fold_sizes": [int(s) for s in plan.sizes()],
        "selected_learners": nuisance.meta,
        "estimators": entries,
    }
    out = Path(config.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, _dumps(doc))
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossfit-att", description="Cross-fitted TMLE and DML for the ATT.")
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--mode", choices=("simulate", "estimate"))
    p.add_argument("--n", type=int, help="sample size per repetition (simulate)")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--folds", type=int, help="cross-fitting folds V")
    p.add_argument("--estimators", help="comma-separated estimator kinds")
    p.add_argument("--input", help="dataset CSV (estimate)")
    p.add_argument("--out", help="output directory (or .json path in estimate mode)")
    p.add_argument("--filter", help="none, epsilon:T or mrad:T")
    p.add_argument("--filter-scope", dest="filter_scope", choices=sorted(SCOPES))
    p.add_argument("--workers", type=int, help="worker processes for repetitions")
    return p


def _error_record(exc: BaseException) -> str:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["key"] = exc.key
    if getattr(exc, "fold", None) is not None:
        record["fold"] = exc.fold
    return json.dumps(record)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config_file(args.config) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k != "config"}
        config = parse_config(doc, overrides)
        path = run_simulate(config) if config.mode == "simulate" else run_estimate(config)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        print(_error_record(exc), file=sys.stderr)
        return 1 if isinstance(exc, (ConfigError, ValueError, OSError)) else 2
    print(str(path))
    return 0


if __name__ == "__main__":
    sys.exit(main())
