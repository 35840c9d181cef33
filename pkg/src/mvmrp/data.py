"""Survey and post-stratification tables, and their expansion into long format.

Every case i is expanded into one row per response category l in the
Cartesian product of the question levels, with the indicator outcome
``response = 1`` on the category the respondent chose.  Question columns of
the expanded table hold the category components l_j, so formula terms such
as ``(1 | race : partyID)`` refer to the category, not to the answer.
"""
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

CATEGORY_SEPARATOR = "-"


@dataclass(frozen=True)
class QuestionSpec:
    """A survey question and its ordered answer levels."""
    name: str
    levels: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(level) for level in self.levels))
        if len(self.levels) < 2:
            raise DataError(f"question {self.name!r} needs at least 2 levels, got {len(self.levels)}")
        if len(set(self.levels)) != len(self.levels):
            raise DataError(f"question {self.name!r} has duplicate levels")

    @property
    def size(self) -> int:
        return len(self.levels)


def category_tuples(questions: Sequence[QuestionSpec]) -> List[Tuple[str, ...]]:
    """Categories of the joint outcome, last question varying fastest."""
    return list(itertools.product(*(q.levels for q in questions)))


def category_labels(questions: Sequence[QuestionSpec]) -> List[str]:
    return [CATEGORY_SEPARATOR.join(c) for c in category_tuples(questions)]


def category_shape(questions: Sequence[QuestionSpec]) -> Tuple[int, ...]:
    return tuple(q.size for q in questions)


@dataclass
class TableSchema:
    """Column declarations for a delimited table.

    ``factors`` maps a column to its closed level list, or to ``None`` for
    levels taken from the data.  ``keys`` are join and grouping columns that
    stay strings whatever they look like ("01" is not 1.0); keys absent
    from the file are ignored.  Other undeclared columns are kept and typed
    by inference when ``infer`` is set.
    """
    case_id: Optional[str] = "case_id"
    factors: Dict[str, Optional[List[str]]] = field(default_factory=dict)
    numerics: List[str] = field(default_factory=list)
    weight: Optional[str] = None
    delimiter: str = ","
    infer: bool = True
    keys: List[str] = field(default_factory=list)

    def with_keys(self, keys: Sequence[str]) -> "TableSchema":
        return replace(self, keys=list(dict.fromkeys([*self.keys, *keys])))

    @property
    def modeled_columns(self) -> List[str]:
        columns = [self.case_id] if self.case_id else []
        columns += list(self.factors) + list(self.numerics)
        if self.weight:
            columns.append(self.weight)
        return list(dict.fromkeys(columns))


def _intern_factor(values: pd.Series, column: str, levels: Optional[Sequence[str]]) -> pd.Categorical:
    values = values.astype(str)
    if levels is None:
        return pd.Categorical(values, categories=sorted(values.unique()))
    levels = [str(level) for level in levels]
    unknown = ~values.isin(levels)
    if unknown.any():
        position = int(np.flatnonzero(unknown.to_numpy())[0])
        row = values.index[position]
        raise DataError(
            f"row {row}: value {values.iloc[position]!r} in column {column!r} is not one of the declared levels {levels}"
        )
    return pd.Categorical(values, categories=levels)


def _parse_numeric(values: pd.Series, column: str) -> pd.Series:
    parsed = pd.to_numeric(values, errors="coerce")
    bad = parsed.isna() & values.notna()
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"row {values.index[position]}: cannot parse {values.iloc[position]!r} in column {column!r} as a number"
        )
    return parsed.astype(float)


def _type_frame(frame: pd.DataFrame, schema: TableSchema) -> Tuple[pd.DataFrame, Dict[str, List[str]], int]:
    missing = [c for c in schema.modeled_columns if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")

    frame = frame.copy()
    for column in schema.numerics + ([schema.weight] if schema.weight else []):
        frame[column] = _parse_numeric(frame[column], column)

    incomplete = frame[schema.modeled_columns].isna().any(axis=1)
    dropped = int(incomplete.sum())
    if dropped:
        logger.warning("dropping %d row(s) with missing values in modeled columns", dropped)
        frame = frame.loc[~incomplete]

    levels: Dict[str, List[str]] = {}
    for column, declared in schema.factors.items():
        frame[column] = _intern_factor(frame[column], column, declared)
        levels[column] = list(frame[column].cat.categories)

    for column in schema.keys:
        if column not in frame.columns or column in levels or column in schema.numerics:
            continue
        if column in (schema.weight, schema.case_id):
            continue
        frame[column] = _intern_factor(frame[column].fillna(""), column, None)
        levels[column] = list(frame[column].cat.categories)

    if schema.infer:
        for column in frame.columns:
            if column in levels or column in schema.numerics or column in (schema.weight, schema.case_id):
                continue
            if pd.api.types.is_numeric_dtype(frame[column]):
                continue
            parsed = pd.to_numeric(frame[column], errors="coerce")
            if parsed.notna().all() and len(parsed):
                frame[column] = parsed.astype(float)
            else:
                frame[column] = _intern_factor(frame[column].fillna(""), column, None)
                levels[column] = list(frame[column].cat.categories)

    if schema.weight is not None and (frame[schema.weight] < 0).any():
        raise DataError(f"negative values in weight column {schema.weight!r}")
    return frame.reset_index(drop=True), levels, dropped


@dataclass
class SurveyTable:
    """Respondent-level table with interned factors."""
    frame: pd.DataFrame
    schema: TableSchema
    levels: Dict[str, List[str]]
    dropped_rows: int = 0

    @property
    def n_cases(self) -> int:
        return len(self.frame)

    @property
    def case_column(self) -> str:
        return self.schema.case_id or "case_id"

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: TableSchema) -> "SurveyTable":
        typed, levels, dropped = _type_frame(frame, schema)
        if schema.case_id is None:
            typed.insert(0, "case_id", [f"case{i}" for i in range(len(typed))])
        case_column = schema.case_id or "case_id"
        typed[case_column] = typed[case_column].astype(str)
        duplicated = typed[case_column].duplicated()
        if duplicated.any():
            raise DataError(f"duplicate case id {typed[case_column][duplicated].iloc[0]!r}")
        return cls(frame=typed, schema=schema, levels=levels, dropped_rows=dropped)


def read_delimited(path: Union[str, Path], delimiter: str = ",") -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"table not found: {path}")
    try:
        return pd.read_csv(path, sep=delimiter, dtype=str, encoding="utf-8", keep_default_na=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}")


def load_table(path: Union[str, Path], schema: TableSchema) -> SurveyTable:
    """Read a delimited UTF-8 file with a header row into a :class:`SurveyTable`."""
    return SurveyTable.from_frame(read_delimited(path, schema.delimiter), schema)


@dataclass
class AltCovariateTable:
    """Alternative-specific covariates keyed by case-level columns and one question's level.

    E.g. lagged copartisanship keyed by ``state`` and the ``partyID`` level.
    """
    frame: pd.DataFrame
    keys: Tuple[str, ...]
    question: str
    columns: Tuple[str, ...]

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.columns = tuple(self.columns)
        missing = [c for c in (*self.keys, self.question, *self.columns) if c not in self.frame.columns]
        if missing:
            raise DataError(f"alternative covariate table is missing column(s): {', '.join(missing)}")
        frame = self.frame[[*self.keys, self.question, *self.columns]].copy()
        for column in (*self.keys, self.question):
            frame[column] = frame[column].astype(str)
        for column in self.columns:
            frame[column] = _parse_numeric(frame[column], column)
        duplicated = frame.duplicated(subset=[*self.keys, self.question])
        if duplicated.any():
            raise DataError(f"alternative covariate table has duplicate keys, first at row {int(np.flatnonzero(duplicated.to_numpy())[0])}")
        self.frame = frame.reset_index(drop=True)

    @classmethod
    def load(cls, path: Union[str, Path], keys: Sequence[str], question: str,
             columns: Sequence[str], delimiter: str = ",") -> "AltCovariateTable":
        return cls(read_delimited(path, delimiter), tuple(keys), question, tuple(columns))


@dataclass
class AugmentedTable:
    """Long-format table with one row per (case, category), sorted by case then category."""
    frame: pd.DataFrame
    questions: Tuple[QuestionSpec, ...]
    case_column: str
    response: str = "response"
    choice: str = "choice"

    @property
    def n_categories(self) -> int:
        return int(np.prod(category_shape(self.questions)))

    @property
    def n_cases(self) -> int:
        return len(self.frame) // self.n_categories

    def observed_categories(self) -> pd.DataFrame:
        """Collapse back to one row per case with the chosen level of every question."""
        outcome = self.frame[self.response].to_numpy().reshape(self.n_cases, self.n_categories)
        chosen = outcome.argmax(axis=1)
        tuples = category_tuples(self.questions)
        cases = self.frame[self.case_column].to_numpy()[:: self.n_categories]
        result = pd.DataFrame({self.case_column: cases})
        for j, q in enumerate(self.questions):
            result[q.name] = [tuples[c][j] for c in chosen]
        return result


def _observed_index(frame: pd.DataFrame, questions: Sequence[QuestionSpec], case_column: str) -> np.ndarray:
    codes = []
    for q in questions:
        if q.name not in frame.columns:
            raise DataError(f"survey has no column for question {q.name!r}")
        values = frame[q.name].astype(str)
        lookup = {level: k for k, level in enumerate(q.levels)}
        code = values.map(lookup)
        if code.isna().any():
            position = int(np.flatnonzero(code.isna().to_numpy())[0])
            raise DataError(
                f"case {frame[case_column].iloc[position]!r}: response {values.iloc[position]!r} "
                f"is not a declared level of question {q.name!r}"
            )
        codes.append(code.to_numpy(dtype=np.int64))
    return np.ravel_multi_index(codes, category_shape(questions))


def _expand(base: pd.DataFrame, questions: Sequence[QuestionSpec], alt_covariates: Sequence[AltCovariateTable],
            id_column: str, choice: str) -> Tuple[pd.DataFrame, np.ndarray]:
    shape = category_shape(questions)
    n_categories = int(np.prod(shape))
    n = len(base)
    category = np.tile(np.arange(n_categories), n)

    long = base.loc[base.index.repeat(n_categories)].reset_index(drop=True)
    components = np.unravel_index(np.arange(n_categories), shape)
    for j, q in enumerate(questions):
        long[q.name] = pd.Categorical.from_codes(np.tile(components[j], n), categories=list(q.levels))
    long[choice] = pd.Categorical.from_codes(category, categories=category_labels(questions))

    question_names = {q.name for q in questions}
    for table in alt_covariates:
        if table.question not in question_names:
            raise DataError(f"alternative covariates vary over unknown question {table.question!r}")
        missing = [k for k in table.keys if k not in long.columns]
        if missing:
            raise DataError(f"alternative covariate key column(s) {missing} not found in the data")
        clashes = [c for c in table.columns if c in long.columns]
        if clashes:
            raise DataError(f"alternative covariate column(s) {clashes} already exist in the data")
        join_on = [*table.keys, table.question]
        left = long[join_on].astype(str)
        merged = left.merge(table.frame, how="left", on=join_on, validate="many_to_one")
        for column in table.columns:
            values = merged[column].to_numpy(dtype=float)
            if np.isnan(values).any():
                row = int(np.flatnonzero(np.isnan(values))[0])
                raise DataError(
                    f"no value of {column!r} for ({long[id_column].iloc[row]!r}, "
                    f"{long[choice].iloc[row]!r}): missing key {tuple(left.iloc[row])}"
                )
            long[column] = values
    return long, category


def expand_augmented(survey: SurveyTable, questions: Sequence[QuestionSpec],
                     alt_covariates: Sequence[AltCovariateTable] = (),
                     response: str = "response", choice: str = "choice") -> AugmentedTable:
    """Expand ``survey`` into N * L rows with indicator outcomes and joined alternative covariates."""
    questions = tuple(questions)
    if response in survey.frame.columns or choice in survey.frame.columns:
        raise DataError(f"survey already has a {response!r} or {choice!r} column")
    observed = _observed_index(survey.frame, questions, survey.case_column)
    long, category = _expand(survey.frame, questions, alt_covariates, survey.case_column, choice)
    n_categories = int(np.prod(category_shape(questions)))
    long[response] = (category == np.repeat(observed, n_categories)).astype(float)
    return AugmentedTable(frame=long, questions=questions, case_column=survey.case_column,
                          response=response, choice=choice)


@dataclass
class PostStratFrame:
    """Post-stratification cells with population weights.

    After :func:`expand_poststrat` the frame has one row per (cell, category)
    and ``questions`` is set.
    """
    frame: pd.DataFrame
    cell_id: str = "cell_id"
    geography: str = "geography"
    weight: str = "weight"
    questions: Optional[Tuple[QuestionSpec, ...]] = None
    choice: str = "choice"

    def __post_init__(self):
        missing = [c for c in (self.cell_id, self.geography, self.weight) if c not in self.frame.columns]
        if missing:
            raise DataError(f"post-stratification frame is missing column(s): {', '.join(missing)}")
        weights = pd.to_numeric(self.frame[self.weight], errors="coerce")
        if weights.isna().any():
            raise DataError(f"non-numeric values in weight column {self.weight!r}")
        if (weights < 0).any():
            raise DataError(f"negative values in weight column {self.weight!r}")
        totals = weights.groupby(self.frame[self.geography].astype(str), observed=True).sum()
        empty = totals.index[totals <= 0]
        if len(empty):
            raise DataError(f"geography {empty[0]!r} has zero total weight")
        if self.questions is None and self.frame[self.cell_id].duplicated().any():
            raise DataError("duplicate cell ids in post-stratification frame")

    @property
    def expanded(self) -> bool:
        return self.questions is not None

    @property
    def n_cells(self) -> int:
        if not self.expanded:
            return len(self.frame)
        return len(self.frame) // int(np.prod(category_shape(self.questions)))

    def cells(self) -> pd.DataFrame:
        """One row per cell (first row of each block when expanded)."""
        if not self.expanded:
            return self.frame
        step = int(np.prod(category_shape(self.questions)))
        return self.frame.iloc[::step].reset_index(drop=True)


def load_poststrat(path: Union[str, Path], schema: TableSchema, cell_id: str = "cell_id",
                   geography: str = "geography", weight: str = "weight") -> PostStratFrame:
    """Read cells; declarations in ``schema`` for columns the file lacks are ignored."""
    raw = read_delimited(path, schema.delimiter)
    schema = replace(
        schema, case_id=cell_id, weight=weight,
        factors={c: levels for c, levels in schema.factors.items() if c in raw.columns},
        numerics=[c for c in schema.numerics if c in raw.columns],
    )
    table = SurveyTable.from_frame(raw, schema)
    return PostStratFrame(frame=table.frame, cell_id=cell_id, geography=geography, weight=weight)


def expand_poststrat(frame: PostStratFrame, questions: Sequence[QuestionSpec],
                     alt_covariates: Sequence[AltCovariateTable] = (), choice: str = "choice") -> PostStratFrame:
    """Expand cells to one row per (cell, category); weights are carried to every row."""
    if frame.expanded:
        raise DataError("post-stratification frame is already expanded")
    clashes = [q.name for q in questions if q.name in frame.frame.columns]
    if clashes:
        raise DataError(f"post-stratification frame has question column(s) {clashes}")
    long, _ = _expand(frame.frame, tuple(questions), alt_covariates, frame.cell_id, choice)
    return PostStratFrame(frame=long, cell_id=frame.cell_id, geography=frame.geography,
                          weight=frame.weight, questions=tuple(questions), choice=choice)
