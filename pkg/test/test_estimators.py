import numpy as np
import pytest

from mvmrp.config import EstimatorKind
from mvmrp.data import AltCovariateTable, PostStratFrame
from mvmrp.engine import SolverConfig
from mvmrp.errors import DesignError
from mvmrp.estimators import (EstimatorConfig, EstimatorFactory, MvmrpEstimator, NaiveIndependentEstimator,
                              PartiallyPooledOvaEstimator, SeparatePoissonEstimator, default_factory,
                              fit_baseline)
from mvmrp.formula import parse_formula

SOLVER = SolverConfig(max_iter=40)


def _config(questions, formula, **kwargs):
    return EstimatorConfig(formula=parse_formula(formula), questions=list(questions), solver=SOLVER, **kwargs)


def _assert_distributions(predictions, n_cells, n_categories=6):
    assert len(predictions) == n_cells
    for prediction in predictions:
        assert prediction.probabilities.shape == (n_categories,)
        assert np.isfinite(prediction.probabilities).all()
        assert prediction.probabilities.sum() == pytest.approx(1.0)


class TestMvmrpEstimator:
    """The joint model and its case-effect-free variant."""

    def test_predict_and_report(self, survey, questions, cells_frame, copart_frame):
        table = AltCovariateTable(copart_frame, keys=("state",), question="party", columns=("lag_copart",))
        config = _config(questions, "response ~ v_fe(case_id) + choice + lag_copart + (1 | state : choice)",
                         alt_covariates=[table])
        estimator = MvmrpEstimator(config).fit(survey)
        assert set(estimator.states) == {"joint"}
        _assert_distributions(estimator.predict(PostStratFrame(cells_frame)), 6)
        report = estimator.report(PostStratFrame(cells_frame))
        assert report.geographies == ["AA", "BB", "CC"]

    def test_ova_equals_joint_model_without_case_effects(self, survey, questions, cells_frame):
        with_fe = _config(questions, "response ~ v_fe(case_id) + choice + (1 | state : choice)")
        without_fe = _config(questions, "response ~ choice + (1 | state : choice)")
        ova = PartiallyPooledOvaEstimator(with_fe).fit(survey).predict(PostStratFrame(cells_frame))
        joint = MvmrpEstimator(without_fe).fit(survey).predict(PostStratFrame(cells_frame))
        for a, b in zip(ova, joint):
            np.testing.assert_allclose(a.probabilities, b.probabilities, atol=1e-12, rtol=0)

    def test_ova_formula(self, questions):
        estimator = PartiallyPooledOvaEstimator(_config(questions, "response ~ v_fe(case_id) + choice"))
        assert estimator.formula.fe_terms == []

    @pytest.mark.parametrize("response", ["choice", "party"])
    def test_category_column_as_response(self, questions, response):
        with pytest.raises(DesignError, match="is a category column"):
            MvmrpEstimator(_config(questions, f"{response} ~ (1 | state)")).validate()

    def test_no_questions(self):
        with pytest.raises(DesignError, match="at least one question"):
            MvmrpEstimator(_config([], "response ~ choice")).validate()

    def test_missing_case_effects_warns(self, questions, caplog):
        with caplog.at_level("WARNING"):
            MvmrpEstimator(_config(questions, "response ~ choice")).validate()
            PartiallyPooledOvaEstimator(_config(questions, "response ~ v_fe(case_id) + choice")).validate()
        assert caplog.text.count("no v_fe term") == 1


class TestSeparatePoissonEstimator:
    """Independent per-category fits."""

    def test_one_state_per_category(self, survey, questions, cells_frame):
        config = _config(questions, "response ~ v_fe(case_id) + choice + income + (1 | state)")
        estimator = SeparatePoissonEstimator(config).fit(survey)
        assert list(estimator.states) == ["D-support", "D-oppose", "R-support", "R-oppose", "I-support", "I-oppose"]
        for state in estimator.states.values():
            assert state.encoding.formula.fixed_terms == ["income"]
            assert state.encoding.fe_variables == []
        _assert_distributions(estimator.predict(PostStratFrame(cells_frame)), 6)

    def test_nothing_left_within_category(self, survey, questions):
        config = _config(questions, "response ~ 0 + v_fe(case_id) + choice + party")
        with pytest.raises(DesignError, match="varies within a category"):
            SeparatePoissonEstimator(config).fit(survey)


class TestNaiveIndependentEstimator:
    """Product of per-question marginals."""

    def test_joint_is_product_of_marginals(self, survey, questions, cells_frame):
        config = _config(questions, "response ~ v_fe(case_id) + choice + (1 | state : choice)")
        estimator = NaiveIndependentEstimator(config).fit(survey)
        assert set(estimator.states) == {"party", "policy"}
        predictions = estimator.predict(PostStratFrame(cells_frame))
        _assert_distributions(predictions, 6)
        for prediction in predictions:
            joint = prediction.probabilities.reshape(3, 2)
            outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
            np.testing.assert_allclose(joint, outer, atol=1e-12)

    def test_crossing_term_rejected(self, survey, questions):
        config = _config(questions, "response ~ choice + (1 | party : policy)")
        with pytest.raises(DesignError, match="crosses several questions"):
            NaiveIndependentEstimator(config).fit(survey)

    def test_alternative_covariate_belongs_to_its_question(self, questions, copart_frame):
        table = AltCovariateTable(copart_frame, keys=("state",), question="party", columns=("lag_copart",))
        config = _config(questions, "response ~ choice + lag_copart + (0 + lag_copart | policy)",
                         alt_covariates=[table])
        estimator = NaiveIndependentEstimator(config)
        with pytest.raises(DesignError):
            estimator.validate()
        party = estimator.formula_for(questions[0])
        policy = estimator.formula_for(questions[1])
        assert party.fixed_terms == ["choice", "lag_copart"]
        assert policy.fixed_terms == ["choice"]
        assert policy.re_terms == []


class TestEstimatorFactory:
    """Registration and lookup."""

    def test_default_kinds(self, questions):
        factory = default_factory()
        config = _config(questions, "response ~ choice")
        assert isinstance(factory.create_estimator(EstimatorKind.PP_OVA, config), PartiallyPooledOvaEstimator)
        assert isinstance(factory.create_estimator(EstimatorKind.NAIVE, config), NaiveIndependentEstimator)

    def test_unregistered_kind(self, questions):
        with pytest.raises(ValueError, match="No estimator registered for mvmrp"):
            EstimatorFactory().create_estimator(EstimatorKind.MVMRP, _config(questions, "response ~ choice"))

    def test_fit_baseline(self, survey, questions, cells_frame):
        predictions = fit_baseline(EstimatorKind.MVMRP, _config(questions, "response ~ choice + (1 | race : choice)"),
                                   survey, PostStratFrame(cells_frame))
        _assert_distributions(predictions, 6)
