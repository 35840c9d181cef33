"""Synthetic superpoll generation and the sample, fit, post-stratify, score loop.

The generator draws a multinomial model of the same additive shape the
default formulas fit: category effects with pairwise question association,
category-specific demographic and geography effects, a contextual slope on
``demvote`` and a geography-level party signal of which ``lag_copart`` is a
noisy measurement.
"""
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import softmax

from .config import EstimatorKind, TruthSource
from .data import (AltCovariateTable, PostStratFrame, QuestionSpec, SurveyTable, TableSchema,
                   category_tuples)
from .engine import SolverConfig
from .estimators import EstimatorConfig, default_factory
from .formula import parse_formula
from .poststrat import CellPrediction, QoiReport, aggregate, mae, report_from_responses

logger = logging.getLogger(__name__)

GEOGRAPHY = "state"
COPART = "lag_copart"


def _default_questions() -> Tuple[QuestionSpec, ...]:
    return (QuestionSpec("partyID", ("D", "R", "I")), QuestionSpec("policy", ("support", "oppose")))


@dataclass
class GeneratorSpec:
    geographies: int = 50
    questions: Tuple[QuestionSpec, ...] = field(default_factory=_default_questions)
    demographics: Dict[str, int] = field(default_factory=lambda: {"race": 4, "sex": 2, "age": 4})
    demographic_sd: Dict[str, float] = field(default_factory=lambda: {"race": 0.6, "sex": 0.3, "age": 0.4})
    geography_sd: float = 0.4
    choice_sd: float = 0.5
    association: float = 1.0
    demvote_slope: float = 0.5
    copart_strength: float = 0.8
    copart_noise: float = 0.3
    superpoll_size: int = 150000
    sample_size: int = 2000
    replications: int = 50
    seed: int = 0
    sampling_bias: float = 0.0
    independent_questions: bool = False

    def __post_init__(self):
        self.questions = tuple(self.questions)
        for name in ("geographies", "superpoll_size", "sample_size", "replications"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(count < 1 for count in self.demographics.values()):
            raise ValueError("demographic level counts must be positive")
        scales = [self.geography_sd, self.choice_sd, self.association, self.demvote_slope, self.copart_noise,
                  *self.demographic_sd.values()]
        if any(s < 0 for s in scales) or self.sampling_bias < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.sample_size > self.superpoll_size:
            raise ValueError("sample_size cannot exceed superpoll_size")
        if not self.questions:
            raise ValueError("at least one question is required")


@dataclass(eq=False)
class Superpoll:
    spec: GeneratorSpec
    survey: SurveyTable
    poststrat: PostStratFrame
    alt_covariates: List[AltCovariateTable]
    true_cells: List[CellPrediction]

    @property
    def questions(self) -> Tuple[QuestionSpec, ...]:
        return self.spec.questions

    def truth(self, source: TruthSource = TruthSource.GENERATIVE) -> QoiReport:
        if source is TruthSource.GENERATIVE:
            return aggregate(self.true_cells, self.questions, "geography")
        return report_from_responses(self.survey.frame, self.questions, GEOGRAPHY, weight="weight")

    def sample(self, rng: np.random.Generator, size: int) -> SurveyTable:
        chosen = np.sort(rng.choice(self.survey.n_cases, size=size, replace=False))
        return SurveyTable(frame=self.survey.frame.iloc[chosen].reset_index(drop=True),
                           schema=self.survey.schema, levels=self.survey.levels)


def _level_names(prefix: str, count: int) -> List[str]:
    return [f"{prefix}{k + 1}" for k in range(count)]


def survey_schema(spec: GeneratorSpec) -> TableSchema:
    factors = {GEOGRAPHY: None, **{name: None for name in spec.demographics}}
    factors.update({q.name: list(q.levels) for q in spec.questions})
    return TableSchema(case_id="case_id", factors=factors, numerics=["demvote"], weight="weight")


def generate_superpoll(spec: GeneratorSpec) -> Superpoll:
    """Draw a population model, its post-stratification frame and a superpoll of respondents.

    With ``independent_questions`` every effect is a sum of per-question
    effects, so the answers are independent within each cell.
    """
    rng = np.random.default_rng([spec.seed, 2**31 - 1])
    questions = spec.questions
    categories = category_tuples(questions)
    n_categories = len(categories)
    codes = np.array([[q.levels.index(c[j]) for j, q in enumerate(questions)] for c in categories])
    states = [f"S{k + 1:02d}" for k in range(spec.geographies)]

    def category_effects(scale: float, rows: int) -> np.ndarray:
        if not spec.independent_questions:
            return rng.normal(0, scale, (rows, n_categories))
        return sum(rng.normal(0, scale, (rows, q.size))[:, codes[:, j]] for j, q in enumerate(questions))

    base = np.zeros(n_categories)
    for j, q in enumerate(questions):
        base += rng.normal(0, spec.choice_sd, q.size)[codes[:, j]]
    if not spec.independent_questions:
        for a, b in itertools.combinations(range(len(questions)), 2):
            pairwise = rng.normal(0, spec.association, (questions[a].size, questions[b].size))
            base += pairwise[codes[:, a], codes[:, b]]

    demographic_effects = {
        name: category_effects(spec.demographic_sd.get(name, 0.0), count)
        for name, count in spec.demographics.items()
    }
    party_signal = rng.normal(0, 1, (spec.geographies, questions[0].size))
    party_signal -= party_signal.mean(axis=1, keepdims=True)
    state_effects = category_effects(spec.geography_sd, spec.geographies)
    state_effects += spec.copart_strength * party_signal[:, codes[:, 0]]
    demvote = rng.normal(0, 1, spec.geographies)
    slopes = category_effects(spec.demvote_slope, 1)[0]
    lag_copart = party_signal + rng.normal(0, spec.copart_noise, party_signal.shape)

    state_size = rng.uniform(0.5, 2.0, spec.geographies)
    shares = {name: rng.dirichlet(np.full(count, 2.0), spec.geographies) for name, count in spec.demographics.items()}

    grids = np.meshgrid(np.arange(spec.geographies), *(np.arange(c) for c in spec.demographics.values()), indexing="ij")
    state_index = grids[0].ravel()
    demo_index = {name: grid.ravel() for name, grid in zip(spec.demographics, grids[1:])}
    n_cells = len(state_index)

    weight = 1000.0 * state_size[state_index]
    eta = base[None, :] + state_effects[state_index] + demvote[state_index, None] * slopes[None, :]
    for name in spec.demographics:
        weight *= shares[name][state_index, demo_index[name]]
        eta += demographic_effects[name][demo_index[name]]
    probabilities = softmax(eta, axis=1)

    cells = pd.DataFrame({"cell_id": [f"cell{k:05d}" for k in range(n_cells)],
                          GEOGRAPHY: np.array(states)[state_index]})
    for name, count in spec.demographics.items():
        cells[name] = np.array(_level_names(name, count))[demo_index[name]]
    cells["demvote"] = demvote[state_index]
    cells["weight"] = weight
    poststrat = PostStratFrame(frame=cells, cell_id="cell_id", geography=GEOGRAPHY, weight="weight")
    true_cells = [
        CellPrediction(cell_id=cell_id, geography=state, probabilities=p, weight=w)
        for cell_id, state, p, w in zip(cells["cell_id"], cells[GEOGRAPHY], probabilities, weight)
    ]

    inclusion = np.exp(spec.sampling_bias * rng.normal(0, 1, n_cells))
    draw = weight * inclusion
    respondent_cells = rng.choice(n_cells, size=spec.superpoll_size, p=draw / draw.sum())
    cumulative = np.cumsum(probabilities[respondent_cells], axis=1)
    uniform = rng.random(spec.superpoll_size)
    chosen = np.minimum((cumulative < uniform[:, None]).sum(axis=1), n_categories - 1)

    respondents = cells.iloc[respondent_cells].drop(columns=["cell_id", "weight"]).reset_index(drop=True)
    respondents.insert(0, "case_id", [f"r{k:06d}" for k in range(spec.superpoll_size)])
    for j, q in enumerate(questions):
        respondents[q.name] = np.array(q.levels)[codes[chosen, j]]
    survey_weight = 1.0 / inclusion[respondent_cells]
    respondents["weight"] = survey_weight / survey_weight.mean()
    survey = SurveyTable.from_frame(respondents, survey_schema(spec))

    copart = pd.DataFrame({
        GEOGRAPHY: np.repeat(states, questions[0].size),
        questions[0].name: np.tile(questions[0].levels, spec.geographies),
        COPART: lag_copart.ravel(),
    })
    alt = AltCovariateTable(copart, keys=(GEOGRAPHY,), question=questions[0].name, columns=(COPART,))
    return Superpoll(spec=spec, survey=survey, poststrat=poststrat, alt_covariates=[alt], true_cells=true_cells)


def default_formulas() -> Dict[str, Tuple[EstimatorKind, str]]:
    """Named runs of the validation loop: estimator kind and formula."""
    hierarchy = ("(1 | state : choice) + (1 | race : choice) + (1 | sex : choice) + (1 | age : choice)"
                 " + (0 + demvote | choice)")
    full = f"response ~ v_fe(case_id) + choice + {COPART} + {hierarchy}"
    return {
        "mvmrp": (EstimatorKind.MVMRP, full),
        "mvmrp-nocopart": (EstimatorKind.MVMRP, f"response ~ v_fe(case_id) + choice + {hierarchy}"),
        "pp-ova": (EstimatorKind.PP_OVA, full),
        "separate": (EstimatorKind.SEPARATE, full),
        "naive": (EstimatorKind.NAIVE, full),
        "truth": (EstimatorKind.TRUTH, full),
    }


def _replicate(superpoll: Superpoll, runs: Dict[str, Tuple[EstimatorKind, str]], replication: int,
               sample_size: int, solver: SolverConfig, truth: QoiReport) -> List[Dict]:
    rng = np.random.default_rng([superpoll.spec.seed, replication])
    sample = superpoll.sample(rng, sample_size)
    factory = default_factory()
    records = []
    for name, (kind, formula) in runs.items():
        try:
            converged, iterations = True, 0
            if kind is EstimatorKind.TRUTH:
                report = truth
            else:
                config = EstimatorConfig(formula=parse_formula(formula), questions=list(superpoll.questions),
                                         solver=solver, alt_covariates=superpoll.alt_covariates)
                estimator = factory.create_estimator(kind, config).fit(sample)
                report = estimator.report(superpoll.poststrat)
                converged = all(state.converged for state in estimator.states.values())
                iterations = max(state.iterations for state in estimator.states.values())
                if not converged:
                    logger.warning("replication %d: %s stopped after %d sweeps without converging",
                                   replication, name, iterations)
            for quantity, value in mae(report, truth).items():
                records.append({"replication": replication, "estimator": name, "quantity": quantity,
                                "mae": value, "converged": converged, "iterations": iterations, "failed": False})
        except Exception as e:
            logger.warning("replication %d: %s failed: %s", replication, name, e)
            records.append({"replication": replication, "estimator": name, "quantity": "",
                            "mae": float("nan"), "converged": False, "iterations": 0, "failed": True})
    return records


@dataclass(eq=False)
class ValidationResult:
    records: pd.DataFrame
    summary: pd.DataFrame
    failures: Dict[str, int]
    unconverged: Dict[str, int] = field(default_factory=dict)

    def write(self, out_dir: Union[str, Path]) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "mae.csv", out_dir / "mae_summary.csv"]
        self.records.to_csv(paths[0], index=False, float_format="%.12g", encoding="utf-8")
        self.summary.to_csv(paths[1], index=False, float_format="%.12g", encoding="utf-8")
        return paths


def summarize(records: pd.DataFrame, reference: Optional[str]) -> pd.DataFrame:
    """Median and mean MAE per (estimator, quantity), with percentage change against ``reference``."""
    if records.empty:
        return pd.DataFrame(columns=["estimator", "quantity", "replications", "median", "mean",
                                     "pct_change_median", "pct_change_mean"])
    grouped = records.groupby(["estimator", "quantity"], sort=False)["mae"]
    summary = grouped.agg(replications="count", median="median", mean="mean").reset_index()
    if reference is not None and reference in set(summary["estimator"]):
        base = summary[summary["estimator"] == reference].set_index("quantity")
        for stat in ("median", "mean"):
            ref = summary["quantity"].map(base[stat])
            with np.errstate(divide="ignore", invalid="ignore"):
                summary[f"pct_change_{stat}"] = (summary[stat] - ref) / ref * 100.0
    else:
        summary["pct_change_median"] = np.nan
        summary["pct_change_mean"] = np.nan
    return summary


def run_validation(spec: GeneratorSpec, runs: Optional[Dict[str, Tuple[EstimatorKind, str]]] = None,
                   solver: Optional[SolverConfig] = None, truth_source: TruthSource = TruthSource.GENERATIVE,
                   reference: Optional[str] = "mvmrp", jobs: int = 1,
                   superpoll: Optional[Superpoll] = None) -> ValidationResult:
    """Repeat sample, fit, post-stratify and score for ``spec.replications`` replications.

    Replication ``r`` draws from ``default_rng([seed, r])``, so results do not
    depend on ``jobs``.  Failed fits are recorded and left out of the summary.
    """
    runs = runs if runs is not None else default_formulas()
    solver = solver or SolverConfig()
    superpoll = superpoll or generate_superpoll(spec)
    truth = superpoll.truth(truth_source)

    batches = Parallel(n_jobs=jobs)(
        delayed(_replicate)(superpoll, runs, r, spec.sample_size, solver, truth)
        for r in range(spec.replications)
    )
    records = pd.DataFrame([record for batch in batches for record in batch],
                           columns=["replication", "estimator", "quantity", "mae", "converged", "iterations",
                                    "failed"])
    failed = records[records["failed"]]
    failures = {name: int(count) for name, count in failed.groupby("estimator").size().items()}
    if failures:
        logger.warning("failed fits excluded from the summary: %s", failures)
    records = records[~records["failed"]].drop(columns="failed").reset_index(drop=True)
    fits = records.drop_duplicates(["replication", "estimator"])
    unconverged = {name: int(count) for name, count in
                   fits[~fits["converged"].astype(bool)].groupby("estimator").size().items()}
    if unconverged:
        logger.warning("fits stopped at max_iter without converging: %s", unconverged)
    return ValidationResult(records=records, summary=summarize(records, reference), failures=failures,
                            unconverged=unconverged)
