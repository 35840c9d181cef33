import numpy as np
import pandas as pd
import pytest

from mvmrp.data import PostStratFrame, expand_augmented, expand_poststrat
from mvmrp.design import build_designs, response_vector
from mvmrp.engine import SolverConfig, fit
from mvmrp.errors import DataError
from mvmrp.formula import parse_formula
from mvmrp.poststrat import (CellPrediction, QoiReport, aggregate, cell_linear_predictors, mae,
                             predict_cells, predictions_frame, report_from_responses, softmax_rows)

FORMULA = "response ~ v_fe(case_id) + choice + (1 | state : choice) + (1 | race : choice)"


@pytest.fixture
def fitted_state(survey, questions):
    augmented = expand_augmented(survey, questions)
    ast = parse_formula(FORMULA)
    return fit(build_designs(ast, augmented), response_vector(ast, augmented), SolverConfig(max_iter=30))


def _report(questions, joint, geographies=("AA",)):
    return QoiReport(questions=questions, geographies=list(geographies), joint=np.asarray(joint, dtype=float))


class TestSoftmax:
    """Row-wise normalisation of linear predictors."""

    def test_rows_sum_to_one(self):
        lp = np.random.default_rng(0).normal(scale=5.0, size=(4, 6))
        np.testing.assert_allclose(softmax_rows(lp).sum(axis=1), 1.0)

    def test_shift_invariant(self):
        lp = np.random.default_rng(1).normal(size=(3, 6))
        np.testing.assert_allclose(softmax_rows(lp), softmax_rows(lp + 700.0), atol=1e-12)


class TestPredictCells:
    """Cell-level predictive distributions from a fitted state."""

    def test_distributions(self, fitted_state, cells_frame, questions):
        frame = expand_poststrat(PostStratFrame(cells_frame), questions)
        predictions = predict_cells(fitted_state, frame)
        assert [p.cell_id for p in predictions] == cells_frame["cell_id"].tolist()
        for prediction in predictions:
            assert prediction.probabilities.shape == (6,)
            assert prediction.probabilities.sum() == pytest.approx(1.0)
            assert (prediction.probabilities > 0).all()
        assert predictions[0].attributes["race"] == "w"

    def test_variance_adjusted_differs(self, fitted_state, cells_frame, questions):
        frame = expand_poststrat(PostStratFrame(cells_frame), questions)
        plain = cell_linear_predictors(fitted_state, frame)
        adjusted = cell_linear_predictors(fitted_state, frame, variance_adjusted=True)
        assert plain.shape == (6, 6)
        assert (adjusted > plain).all()

    def test_unseen_geography(self, fitted_state, cells_frame, questions):
        extra = pd.DataFrame([{"cell_id": "DD-w", "geography": "DD", "state": "DD", "race": "w",
                               "income": 0.0, "weight": 4.0}])
        frame = expand_poststrat(PostStratFrame(pd.concat([cells_frame, extra], ignore_index=True)), questions)
        predictions = predict_cells(fitted_state, frame)
        assert predictions[-1].geography == "DD"
        assert predictions[-1].probabilities.sum() == pytest.approx(1.0)

    def test_requires_expanded_frame(self, fitted_state, cells_frame):
        with pytest.raises(DataError, match="must be expanded"):
            cell_linear_predictors(fitted_state, PostStratFrame(cells_frame))

    def test_predictions_frame(self, fitted_state, cells_frame, questions):
        frame = expand_poststrat(PostStratFrame(cells_frame), questions)
        table = predictions_frame(predict_cells(fitted_state, frame), questions)
        assert list(table.columns) == ["cell_id", "geography", "category", "probability", "weight"]
        assert len(table) == 36
        assert table["category"].iloc[:2].tolist() == ["D-support", "D-oppose"]
        np.testing.assert_allclose(table.groupby("cell_id")["probability"].sum(), 1.0)


class TestAggregate:
    """Weighted averaging of cell distributions."""

    def test_weighted_mean(self, questions):
        first, second = np.eye(6)[0], np.eye(6)[1]
        predictions = [
            CellPrediction("a", "G", first, 1.0, {"race": "w"}),
            CellPrediction("b", "G", second, 3.0, {"race": "b"}),
            CellPrediction("c", "H", second, 2.0, {"race": "w"}),
        ]
        report = aggregate(predictions, questions)
        assert report.geographies == ["G", "H"]
        np.testing.assert_allclose(report.flat_joint()[0], [0.25, 0.75, 0, 0, 0, 0])
        np.testing.assert_allclose(report.flat_joint()[1], [0, 1, 0, 0, 0, 0])

    def test_group_by_attribute(self, questions):
        predictions = [
            CellPrediction("a", "G", np.full(6, 1 / 6), 1.0, {"race": "w"}),
            CellPrediction("b", "H", np.full(6, 1 / 6), 1.0, {"race": "w"}),
        ]
        report = aggregate(predictions, questions, by=["geography", "race"])
        assert report.geographies == ["G:w", "H:w"]

    def test_unknown_column(self, questions):
        predictions = [CellPrediction("a", "G", np.full(6, 1 / 6), 1.0)]
        with pytest.raises(DataError, match="unknown column 'age'"):
            aggregate(predictions, questions, by="age")

    def test_zero_weight_group(self, questions):
        predictions = [CellPrediction("a", "G", np.full(6, 1 / 6), 0.0)]
        with pytest.raises(DataError, match="zero total weight"):
            aggregate(predictions, questions)

    def test_fitted_states_aggregate_to_distributions(self, fitted_state, cells_frame, questions):
        frame = expand_poststrat(PostStratFrame(cells_frame), questions)
        report = aggregate(predict_cells(fitted_state, frame), questions)
        assert report.geographies == ["AA", "BB", "CC"]
        np.testing.assert_allclose(report.flat_joint().sum(axis=1), 1.0)


class TestQoiReport:
    """Quantities derived from joint distributions."""

    def test_marginals(self, questions):
        joint = np.array([[0.1, 0.2], [0.3, 0.1], [0.2, 0.1]])
        report = _report(questions, joint[None])
        np.testing.assert_allclose(report.marginal("party")[0], [0.3, 0.4, 0.3])
        np.testing.assert_allclose(report.marginal("policy")[0], [0.6, 0.4])

    def test_conditional_recomposes_joint(self, questions):
        joint = np.random.default_rng(3).dirichlet(np.ones(6), size=2).reshape(2, 3, 2)
        report = _report(questions, joint, geographies=("AA", "BB"))
        conditional = report.conditional("policy", "party")
        assert conditional.shape == (2, 3, 2)
        np.testing.assert_allclose(conditional * report.marginal("party")[:, :, None], joint)
        flipped = report.conditional("party", "policy")
        np.testing.assert_allclose(flipped * report.marginal("policy")[:, :, None], np.swapaxes(joint, 1, 2))

    def test_conditional_undefined_for_empty_level(self, questions):
        joint = np.array([[0.5, 0.2], [0.2, 0.1], [0.0, 0.0]])
        report = _report(questions, joint[None])
        conditional = report.conditional("policy", "party")[0]
        assert np.isnan(conditional[2]).all()
        np.testing.assert_allclose(conditional[0], [5 / 7, 2 / 7])
        entropy = report.conditional_entropy("party")[0]
        assert np.isnan(entropy[2])
        assert np.isfinite(entropy[:2]).all()

    def test_conditional_same_question(self, questions):
        report = _report(questions, np.full((1, 3, 2), 1 / 6))
        with pytest.raises(ValueError, match="must differ"):
            report.conditional("party", "party")

    def test_entropy_bounds(self, questions):
        uniform = _report(questions, np.full((1, 3, 2), 1 / 6))
        assert uniform.entropy()[0] == pytest.approx(np.log(6))
        assert uniform.entropy(standardized=True)[0] == pytest.approx(1.0)
        point = np.zeros((1, 3, 2))
        point[0, 1, 0] = 1.0
        assert _report(questions, point).entropy()[0] == 0.0

    def test_conditional_entropy_standardized(self, questions):
        report = _report(questions, np.full((1, 3, 2), 1 / 6))
        np.testing.assert_allclose(report.conditional_entropy("party", standardized=True), 1.0)
        np.testing.assert_allclose(report.conditional_entropy("policy"), np.log(3))

    def test_quantity_names(self, questions):
        report = _report(questions, np.full((1, 3, 2), 1 / 6))
        assert report.quantity_names() == [
            "joint", "marginal:party", "marginal:policy", "conditional:party|policy",
            "conditional:policy|party", "entropy", "entropy|party", "entropy|policy",
        ]
        with pytest.raises(KeyError):
            report.quantity("variance")

    def test_to_frame_and_json(self, questions):
        joint = np.array([[0.5, 0.2], [0.2, 0.1], [0.0, 0.0]])
        report = _report(questions, joint[None])
        frame = report.to_frame(["marginal:party"])
        assert list(frame.columns) == ["geography", "quantity", "category", "value"]
        assert frame["category"].tolist() == ["D", "R", "I"]
        document = report.to_json()
        assert document["questions"]["party"] == ["D", "R", "I"]
        assert document["quantities"]["conditional:policy|party"]["AA"]["support|I"] is None
        assert document["quantities"]["marginal:policy"]["AA"]["support"] == pytest.approx(0.7)


class TestReportFromResponses:
    """Direct disaggregation of respondent answers."""

    def test_frequencies(self, survey_frame, questions):
        report = report_from_responses(survey_frame, questions, by="state")
        assert report.geographies == ["AA", "BB", "CC"]
        subset = survey_frame[survey_frame["state"] == "BB"]
        expected = (subset["party"] == "R").mean()
        assert report.marginal("party")[1, 1] == pytest.approx(expected)

    def test_weighted(self, questions):
        frame = pd.DataFrame({"g": ["x", "x"], "party": ["D", "R"], "policy": ["support", "support"],
                              "w": [1.0, 3.0]})
        report = report_from_responses(frame, questions, by="g", weight="w")
        np.testing.assert_allclose(report.marginal("party")[0], [0.25, 0.75, 0.0])

    def test_missing_column(self, survey_frame, questions):
        with pytest.raises(DataError, match="missing column"):
            report_from_responses(survey_frame, questions, by="county")

    def test_undeclared_answer(self, questions):
        frame = pd.DataFrame({"g": ["x"], "party": ["Green"], "policy": ["support"]})
        with pytest.raises(DataError, match="declared levels"):
            report_from_responses(frame, questions, by="g")


class TestMae:
    """Error summaries between reports."""

    def test_zero_against_itself(self, survey_frame, questions):
        report = report_from_responses(survey_frame, questions, by="state")
        errors = mae(report, report)
        assert set(errors) == set(report.quantity_names())
        assert all(value == 0.0 for value in errors.values())

    def test_known_error(self, questions):
        truth = _report(questions, np.full((1, 3, 2), 1 / 6))
        estimate = np.full((1, 3, 2), 1 / 6)
        estimate[0, 0, 0] += 0.06
        estimate[0, 2, 1] -= 0.06
        errors = mae(_report(questions, estimate), truth, ["joint"])
        assert errors["joint"] == pytest.approx(0.02)

    def test_geography_mismatch(self, questions):
        left = _report(questions, np.full((1, 3, 2), 1 / 6), geographies=("AA",))
        right = _report(questions, np.full((1, 3, 2), 1 / 6), geographies=("BB",))
        with pytest.raises(DataError, match=r"geography sets differ: \['AA', 'BB'\]"):
            mae(left, right)
