"""Estimators of cell-level joint distributions over the answer categories.

``mvmrp`` fits the multinomial model through its Poisson representation.
The baselines share the same formula: ``pp-ova`` drops the case effects,
``separate`` fits each category on its own and ``naive`` fits one model per
question and multiplies the marginals.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
from joblib import Parallel, delayed

from .config import EstimatorKind
from .data import (AltCovariateTable, PostStratFrame, QuestionSpec, SurveyTable, expand_augmented,
                   expand_poststrat)
from .design import build_designs, response_vector
from .engine import SolverConfig, VariationalState, fit
from .errors import DesignError
from .formula import FormulaAst
from .poststrat import (CellPrediction, QoiReport, aggregate, linear_predictor, predict_cells,
                        predictions_from_probabilities, softmax_rows)

logger = logging.getLogger(__name__)

CHOICE_COLUMN = "choice"


@dataclass
class EstimatorConfig:
    """Everything an estimator needs besides the data."""
    formula: FormulaAst
    questions: List[QuestionSpec]
    solver: SolverConfig = field(default_factory=SolverConfig)
    alt_covariates: List[AltCovariateTable] = field(default_factory=list)
    standardize: bool = False
    variance_adjusted: bool = False
    jobs: int = 1


class Estimator(ABC):
    """Base class for estimators of cell-level joint distributions."""

    def __init__(self, config: EstimatorConfig):
        self.config = config
        self.states: Dict[str, VariationalState] = {}

    def validate(self) -> None:
        """Raise if the formula cannot be used with this estimator."""
        if not self.config.questions:
            raise DesignError("at least one question is required")
        reserved = {q.name for q in self.config.questions} | {CHOICE_COLUMN}
        if self.config.formula.response in reserved:
            raise DesignError(f"response {self.config.formula.response!r} is a category column, not the outcome")

    @abstractmethod
    def fit(self, survey: SurveyTable) -> "Estimator":
        pass

    @abstractmethod
    def predict(self, poststrat: PostStratFrame) -> List[CellPrediction]:
        """Per-cell probabilities over the joint categories of an unexpanded frame."""
        pass

    def report(self, poststrat: PostStratFrame, by="geography") -> QoiReport:
        return aggregate(self.predict(poststrat), self.config.questions, by)

    def _fit_model(self, formula: FormulaAst, survey: SurveyTable, questions: Sequence[QuestionSpec],
                   alt_covariates: Sequence[AltCovariateTable]) -> VariationalState:
        augmented = expand_augmented(survey, questions, alt_covariates)
        designs = build_designs(formula, augmented, self.config.standardize)
        return fit(designs, response_vector(formula, augmented), self.config.solver)


class MvmrpEstimator(Estimator):
    """The full multinomial model through the Poisson representation."""
    case_effects = True

    @property
    def formula(self) -> FormulaAst:
        return self.config.formula

    def validate(self) -> None:
        super().validate()
        if self.case_effects and not self.formula.fe_terms:
            logger.warning("formula has no v_fe term; case totals are not fixed and the fit is not multinomial")

    def fit(self, survey: SurveyTable) -> "Estimator":
        self.validate()
        self.states["joint"] = self._fit_model(self.formula, survey, self.config.questions,
                                               self.config.alt_covariates)
        return self

    def predict(self, poststrat: PostStratFrame) -> List[CellPrediction]:
        expanded = expand_poststrat(poststrat, self.config.questions, self.config.alt_covariates)
        return predict_cells(self.states["joint"], expanded, self.config.variance_adjusted)


class PartiallyPooledOvaEstimator(MvmrpEstimator):
    """The same model with the case fixed effects removed."""
    case_effects = False

    @property
    def formula(self) -> FormulaAst:
        return self.config.formula.without_fe()


def _separate_formula(ast: FormulaAst, questions: Sequence[QuestionSpec]) -> FormulaAst:
    constant = {q.name for q in questions} | {CHOICE_COLUMN}
    dropped = [t for t in ast.fixed_terms if t in constant]
    if dropped:
        logger.info("separate fits drop fixed terms constant within a category: %s", dropped)
    return FormulaAst(response=ast.response, fixed_terms=[t for t in ast.fixed_terms if t not in constant],
                      re_terms=list(ast.re_terms), fe_terms=[], intercept=ast.intercept)


def _fit_category(config: EstimatorConfig, formula: FormulaAst, rows) -> VariationalState:
    designs = build_designs(formula, rows, config.standardize)
    return fit(designs, response_vector(formula, rows), config.solver)


class SeparatePoissonEstimator(Estimator):
    """One independent hierarchical Poisson regression per category, combined by softmax."""

    def validate(self) -> None:
        super().validate()
        ast = self.config.formula
        constant = {q.name for q in self.config.questions} | {CHOICE_COLUMN}
        if not (ast.intercept or ast.re_terms or any(t not in constant for t in ast.fixed_terms)):
            raise DesignError("separate fits need a term that varies within a category")

    def fit(self, survey: SurveyTable) -> "Estimator":
        self.validate()
        formula = _separate_formula(self.config.formula, self.config.questions)
        augmented = expand_augmented(survey, self.config.questions, self.config.alt_covariates)
        frame = augmented.frame
        labels = list(frame[CHOICE_COLUMN].cat.categories)
        subsets = [frame[frame[CHOICE_COLUMN] == label].reset_index(drop=True) for label in labels]
        states = Parallel(n_jobs=self.config.jobs)(
            delayed(_fit_category)(self.config, formula, rows) for rows in subsets
        )
        self.states = dict(zip(labels, states))
        return self

    def predict(self, poststrat: PostStratFrame) -> List[CellPrediction]:
        expanded = expand_poststrat(poststrat, self.config.questions, self.config.alt_covariates)
        frame = expanded.frame
        lp = np.zeros((expanded.n_cells, len(self.states)))
        for c, (label, state) in enumerate(self.states.items()):
            rows = frame[frame[CHOICE_COLUMN] == label]
            lp[:, c] = linear_predictor(state, rows, self.config.variance_adjusted)
        return predictions_from_probabilities(expanded, softmax_rows(lp))


class NaiveIndependentEstimator(Estimator):
    """Independent models per question; the joint is the product of the marginals."""

    def _questions_in(self, variables: Sequence[str]) -> Set[str]:
        names = {q.name for q in self.config.questions}
        found = {v for v in variables if v in names}
        for table in self.config.alt_covariates:
            if any(v in table.columns for v in variables):
                found.add(table.question)
        return found

    def validate(self) -> None:
        super().validate()
        for term in self.config.formula.re_terms:
            if len(self._questions_in(term.variables)) > 1:
                raise DesignError(
                    f"term {term.label} crosses several questions; remove it to use the naive estimator"
                )

    def formula_for(self, question: QuestionSpec) -> FormulaAst:
        """Drop every term that refers to another question."""
        ast = self.config.formula

        def others(variables):
            return self._questions_in(variables) - {question.name}

        fixed = [t for t in ast.fixed_terms if not others([t])]
        re_terms = [t for t in ast.re_terms if not others(t.variables)]
        dropped = [t for t in ast.fixed_terms if t not in fixed] + [t.label for t in ast.re_terms if t not in re_terms]
        if dropped:
            logger.info("naive fit of %s drops terms of other questions: %s", question.name, dropped)
        return FormulaAst(response=ast.response, fixed_terms=fixed, re_terms=re_terms,
                          fe_terms=list(ast.fe_terms), intercept=ast.intercept)

    def _alt_covariates_for(self, question: QuestionSpec) -> List[AltCovariateTable]:
        return [t for t in self.config.alt_covariates if t.question == question.name]

    def _without_other_answers(self, survey: SurveyTable, question: QuestionSpec) -> SurveyTable:
        others = [q.name for q in self.config.questions if q.name != question.name]
        return replace(survey, frame=survey.frame.drop(columns=others))

    def fit(self, survey: SurveyTable) -> "Estimator":
        self.validate()
        for question in self.config.questions:
            self.states[question.name] = self._fit_model(
                self.formula_for(question), self._without_other_answers(survey, question),
                [question], self._alt_covariates_for(question),
            )
        return self

    def predict(self, poststrat: PostStratFrame) -> List[CellPrediction]:
        joint: Optional[np.ndarray] = None
        for question in self.config.questions:
            expanded = expand_poststrat(poststrat, [question], self._alt_covariates_for(question))
            marginal = np.array([p.probabilities for p in predict_cells(
                self.states[question.name], expanded, self.config.variance_adjusted)])
            joint = marginal if joint is None else (joint[:, :, None] * marginal[:, None, :]).reshape(len(marginal), -1)
        expanded = expand_poststrat(poststrat, self.config.questions, self.config.alt_covariates)
        return predictions_from_probabilities(expanded, joint)


class EstimatorFactory:
    """Factory for creating estimators."""

    def __init__(self):
        self._estimator_classes: Dict[EstimatorKind, type[Estimator]] = {}

    def register_estimator(self, kind: EstimatorKind, estimator_class: type[Estimator]) -> None:
        """Register an estimator class for a kind."""
        self._estimator_classes[kind] = estimator_class

    def create_estimator(self, kind: EstimatorKind, config: EstimatorConfig) -> Estimator:
        estimator_class = self._estimator_classes.get(kind)
        if not estimator_class:
            raise ValueError(f"No estimator registered for {kind.value}")
        return estimator_class(config)


def default_factory() -> EstimatorFactory:
    factory = EstimatorFactory()
    factory.register_estimator(EstimatorKind.MVMRP, MvmrpEstimator)
    factory.register_estimator(EstimatorKind.PP_OVA, PartiallyPooledOvaEstimator)
    factory.register_estimator(EstimatorKind.SEPARATE, SeparatePoissonEstimator)
    factory.register_estimator(EstimatorKind.NAIVE, NaiveIndependentEstimator)
    return factory


def fit_baseline(kind: EstimatorKind, config: EstimatorConfig, survey: SurveyTable,
                 poststrat: PostStratFrame) -> List[CellPrediction]:
    """Fit ``kind`` on ``survey`` and predict the cells of ``poststrat``."""
    estimator = default_factory().create_estimator(kind, config)
    return estimator.fit(survey).predict(poststrat)
