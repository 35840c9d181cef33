"""Post-stratified joint distributions and the quantities derived from them."""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from .data import PostStratFrame, QuestionSpec, category_labels, category_shape
from .design import encode_rows
from .engine import VariationalState, predictor_moments
from .errors import DataError

logger = logging.getLogger(__name__)

CONDITIONING_EPS = 1e-12
GROUP_SEPARATOR = ":"


@dataclass(frozen=True, eq=False)
class CellPrediction:
    cell_id: str
    geography: str
    probabilities: np.ndarray
    weight: float
    attributes: Mapping[str, Any] = field(default_factory=dict)


def softmax_rows(lp: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    return softmax(np.asarray(lp, dtype=float), axis=1)


def linear_predictor(state: VariationalState, rows: pd.DataFrame, variance_adjusted: bool = False) -> np.ndarray:
    """Row-wise linear predictor means, excluding ``v_fe`` terms.

    Random-effect levels absent from the fit contribute the prior mean 0.
    With ``variance_adjusted`` half the predictor variance is added.
    """
    designs = encode_rows(state.encoding, rows, include_fe=False, allow_unseen=True)
    for block in designs.re_blocks:
        unseen = int((block.levels < 0).sum())
        if unseen:
            logger.info("%d row(s) with levels of %s absent from the fit; using the prior mean", unseen,
                        block.term.label)
    parts = predictor_moments(state, designs, include_fe=False)
    lp = np.sum([mean for _, mean, _ in parts], axis=0)
    if variance_adjusted:
        lp = lp + 0.5 * np.sum([var for _, _, var in parts], axis=0)
    return lp


def cell_linear_predictors(state: VariationalState, frame: PostStratFrame,
                           variance_adjusted: bool = False) -> np.ndarray:
    """``(cells, categories)`` linear predictors of an expanded frame."""
    if not frame.expanded:
        raise DataError("post-stratification frame must be expanded before prediction")
    return linear_predictor(state, frame.frame, variance_adjusted).reshape(frame.n_cells, -1)


def predict_cells(state: VariationalState, frame: PostStratFrame,
                  variance_adjusted: bool = False) -> List[CellPrediction]:
    """Softmax over each cell's linear predictors."""
    probabilities = softmax_rows(cell_linear_predictors(state, frame, variance_adjusted))
    return predictions_from_probabilities(frame, probabilities)


def predictions_from_probabilities(frame: PostStratFrame, probabilities: np.ndarray) -> List[CellPrediction]:
    cells = frame.cells()
    skip = {frame.cell_id, frame.geography, frame.weight, frame.choice}
    if frame.questions:
        skip |= {q.name for q in frame.questions}
    attribute_columns = [c for c in cells.columns if c not in skip]
    return [
        CellPrediction(
            cell_id=str(record[frame.cell_id]),
            geography=str(record[frame.geography]),
            probabilities=p,
            weight=float(record[frame.weight]),
            attributes={c: record[c] for c in attribute_columns},
        )
        for record, p in zip(cells.to_dict("records"), probabilities)
    ]


def predictions_frame(predictions: Sequence[CellPrediction], questions: Sequence[QuestionSpec]) -> pd.DataFrame:
    """Tidy frame with one row per (cell, category)."""
    labels = category_labels(questions)
    n = len(predictions)
    return pd.DataFrame({
        "cell_id": np.repeat([p.cell_id for p in predictions], len(labels)),
        "geography": np.repeat([p.geography for p in predictions], len(labels)),
        "category": np.tile(labels, n),
        "probability": np.concatenate([p.probabilities for p in predictions]) if n else np.zeros(0),
        "weight": np.repeat([p.weight for p in predictions], len(labels)),
    })


def _entropy(p: np.ndarray, axis) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


@dataclass(eq=False)
class QoiReport:
    """Joint distributions per group, shaped ``(groups, L_1, ..., L_J)``.

    Quantity names: ``joint``, ``marginal:<q>``, ``conditional:<q>|<r>``,
    ``entropy`` and ``entropy|<r>`` (entropy of the other questions given
    each level of ``r``).
    """
    questions: Tuple[QuestionSpec, ...]
    geographies: List[str]
    joint: np.ndarray

    def __post_init__(self):
        self.questions = tuple(self.questions)
        self.geographies = [str(g) for g in self.geographies]
        expected = (len(self.geographies), *category_shape(self.questions))
        self.joint = np.asarray(self.joint, dtype=float).reshape(expected)

    @property
    def n_categories(self) -> int:
        return int(np.prod(category_shape(self.questions)))

    def _axis(self, question: str) -> int:
        for j, q in enumerate(self.questions):
            if q.name == question:
                return j + 1
        raise KeyError(f"unknown question {question!r}")

    def _question(self, name: str) -> QuestionSpec:
        return self.questions[self._axis(name) - 1]

    def flat_joint(self) -> np.ndarray:
        return self.joint.reshape(len(self.geographies), -1)

    def marginal(self, question: str) -> np.ndarray:
        axis = self._axis(question)
        others = tuple(a for a in range(1, self.joint.ndim) if a != axis)
        return self.joint.sum(axis=others)

    def pair(self, target: str, given: str) -> np.ndarray:
        """``(groups, L_given, L_target)`` joint of two questions."""
        if target == given:
            raise ValueError("target and conditioning question must differ")
        a_given, a_target = self._axis(given), self._axis(target)
        others = tuple(a for a in range(1, self.joint.ndim) if a not in (a_given, a_target))
        pair = self.joint.sum(axis=others)
        return pair if a_given < a_target else np.swapaxes(pair, 1, 2)

    def conditional(self, target: str, given: str) -> np.ndarray:
        """``P(target | given)`` as ``(groups, L_given, L_target)``; NaN where ``P(given) < 1e-12``."""
        pair = self.pair(target, given)
        denominator = pair.sum(axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            result = pair / denominator
        return np.where(denominator < CONDITIONING_EPS, np.nan, result)

    def entropy(self, standardized: bool = False) -> np.ndarray:
        values = _entropy(self.flat_joint(), axis=1)
        return values / np.log(self.n_categories) if standardized else values

    def conditional_entropy(self, given: str, standardized: bool = False) -> np.ndarray:
        """Entropy of the remaining questions' joint given each level of ``given``: ``(groups, L_given)``."""
        axis = self._axis(given)
        moved = np.moveaxis(self.joint, axis, 1)
        groups, levels = moved.shape[:2]
        flat = moved.reshape(groups, levels, -1)
        denominator = flat.sum(axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            conditional = flat / denominator
        values = _entropy(np.nan_to_num(conditional), axis=2)
        values = np.where(denominator[..., 0] < CONDITIONING_EPS, np.nan, values)
        if standardized:
            remaining = flat.shape[2]
            values = values / np.log(remaining) if remaining > 1 else np.zeros_like(values)
        return values

    def quantity_names(self) -> List[str]:
        names = ["joint"] + [f"marginal:{q.name}" for q in self.questions]
        for target, given in itertools.permutations([q.name for q in self.questions], 2):
            names.append(f"conditional:{target}|{given}")
        names.append("entropy")
        if len(self.questions) > 1:
            names += [f"entropy|{q.name}" for q in self.questions]
        return names

    def quantity(self, name: str) -> Tuple[np.ndarray, List[str]]:
        """Values ``(groups, categories)`` and category labels of a named quantity."""
        if name == "joint":
            return self.flat_joint(), category_labels(self.questions)
        if name.startswith("marginal:"):
            question = self._question(name.split(":", 1)[1])
            return self.marginal(question.name), list(question.levels)
        if name.startswith("conditional:"):
            target, given = name.split(":", 1)[1].split("|")
            t, g = self._question(target), self._question(given)
            values = self.conditional(t.name, g.name).reshape(len(self.geographies), -1)
            labels = [f"{a}|{b}" for b in g.levels for a in t.levels]
            return values, labels
        if name == "entropy":
            return np.column_stack([self.entropy(), self.entropy(standardized=True)]), ["raw", "standardized"]
        if name.startswith("entropy|"):
            given = self._question(name.split("|", 1)[1])
            values = np.concatenate([self.conditional_entropy(given.name),
                                     self.conditional_entropy(given.name, standardized=True)], axis=1)
            labels = [f"{level}/raw" for level in given.levels] + [f"{level}/standardized" for level in given.levels]
            return values, labels
        raise KeyError(f"unknown quantity {name!r}")

    def to_frame(self, quantities: Optional[Iterable[str]] = None) -> pd.DataFrame:
        """Tidy ``(geography, quantity, category, value)`` rows."""
        frames = []
        for name in quantities or self.quantity_names():
            values, labels = self.quantity(name)
            frames.append(pd.DataFrame({
                "geography": np.repeat(self.geographies, len(labels)),
                "quantity": name,
                "category": np.tile(labels, len(self.geographies)),
                "value": values.ravel(),
            }))
        return pd.concat(frames, ignore_index=True)

    def to_json(self) -> Dict[str, Any]:
        result: Dict[str, Any] = {
            "questions": {q.name: list(q.levels) for q in self.questions},
            "geographies": list(self.geographies),
            "quantities": {},
        }
        for name in self.quantity_names():
            values, labels = self.quantity(name)
            result["quantities"][name] = {
                geography: {label: (None if np.isnan(v) else float(v)) for label, v in zip(labels, row)}
                for geography, row in zip(self.geographies, values)
            }
        return result


def _group_key(prediction: CellPrediction, by: Sequence[str]) -> str:
    parts = []
    for column in by:
        if column == "geography":
            parts.append(prediction.geography)
        elif column in prediction.attributes:
            parts.append(str(prediction.attributes[column]))
        else:
            raise DataError(f"cannot aggregate by unknown column {column!r}")
    return GROUP_SEPARATOR.join(parts)


def aggregate(predictions: Sequence[CellPrediction], questions: Sequence[QuestionSpec],
              by: Union[str, Sequence[str]] = "geography") -> QoiReport:
    """Weight cell distributions into one joint distribution per group."""
    by = [by] if isinstance(by, str) else list(by)
    keys = [_group_key(p, by) for p in predictions]
    groups = sorted(set(keys))
    index = {g: k for k, g in enumerate(groups)}
    n_categories = int(np.prod(category_shape(questions)))
    rows = np.array([index[k] for k in keys], dtype=np.int64)
    weights = np.array([p.weight for p in predictions], dtype=float)
    probabilities = np.array([p.probabilities for p in predictions], dtype=float).reshape(len(predictions), n_categories)

    totals = np.bincount(rows, weights=weights, minlength=len(groups))
    empty = [groups[k] for k in np.flatnonzero(~(totals > 0))]
    if empty:
        raise DataError(f"group {empty[0]!r} has zero total weight")
    joint = np.column_stack([
        np.bincount(rows, weights=weights * probabilities[:, c], minlength=len(groups)) for c in range(n_categories)
    ]) / totals[:, None]
    return QoiReport(questions=tuple(questions), geographies=groups, joint=joint)


def report_from_responses(frame: pd.DataFrame, questions: Sequence[QuestionSpec],
                          by: Union[str, Sequence[str]] = "geography", weight: Optional[str] = None) -> QoiReport:
    """Weighted disaggregation of respondent-level answers into joint distributions per group."""
    by = [by] if isinstance(by, str) else list(by)
    missing = [c for c in [*by, *(q.name for q in questions)] + ([weight] if weight else []) if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    keys = frame[by[0]].astype(str)
    for column in by[1:]:
        keys = keys + GROUP_SEPARATOR + frame[column].astype(str)
    groups = sorted(keys.unique())
    rows = keys.map({g: k for k, g in enumerate(groups)}).to_numpy(dtype=np.int64)

    codes = []
    for q in questions:
        code = frame[q.name].astype(str).map({level: k for k, level in enumerate(q.levels)})
        if code.isna().any():
            raise DataError(f"response outside the declared levels of question {q.name!r}")
        codes.append(code.to_numpy(dtype=np.int64))
    shape = category_shape(questions)
    category = np.ravel_multi_index(codes, shape)
    weights = frame[weight].to_numpy(dtype=float) if weight else np.ones(len(frame))

    n_categories = int(np.prod(shape))
    counts = np.zeros((len(groups), n_categories))
    np.add.at(counts, (rows, category), weights)
    totals = counts.sum(axis=1, keepdims=True)
    if (totals <= 0).any():
        raise DataError("a group has zero total weight")
    return QoiReport(questions=tuple(questions), geographies=groups, joint=counts / totals)


def mae(estimates: QoiReport, truth: QoiReport, quantities: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """Mean absolute error per quantity, averaged over groups and categories.

    Missing conditionals are skipped.
    """
    if set(estimates.geographies) != set(truth.geographies):
        difference = sorted(set(estimates.geographies) ^ set(truth.geographies))
        raise DataError(f"geography sets differ: {difference}")
    order = [estimates.geographies.index(g) for g in truth.geographies]
    result = {}
    for name in quantities or truth.quantity_names():
        estimate, _ = estimates.quantity(name)
        target, _ = truth.quantity(name)
        errors = np.abs(estimate[order] - target)
        result[name] = float(np.nanmean(errors)) if np.isfinite(errors).any() else float("nan")
    return result
