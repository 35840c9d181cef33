"""Sparse design blocks for the general-design model.

Fixed terms become the unregularized matrix ``X``: an optional intercept,
numeric covariates as-is (optionally scaled to unit variance) and
categorical covariates in sum-to-zero (effects) coding.  Each random-effect
term becomes ``Z_j`` with ``g_j * d_j`` columns ordered level-major, and each
``v_fe`` term a one-hot block with a sum-to-zero constraint.

The encoding learned from the fitting data is kept in :class:`ModelEncoding`
so the same columns can be rebuilt for post-stratification frames.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import io as spio
from scipy import linalg, sparse

from .data import AugmentedTable
from .errors import DesignError
from .formula import FormulaAst, RandomEffectTerm

logger = logging.getLogger(__name__)

LEVEL_SEPARATOR = ":"
RANK_CHECK_LIMIT = 2000


@dataclass
class FixedColumn:
    name: str
    kind: str  # 'intercept', 'numeric' or 'effect'
    variable: Optional[str] = None
    level: Optional[str] = None
    levels: Optional[List[str]] = None
    scale: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name, "kind": self.kind, "variable": self.variable,
            "level": self.level, "levels": self.levels, "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FixedColumn":
        return cls(**data)


@dataclass
class ReEncoding:
    term: RandomEffectTerm
    level_names: List[str]

    @property
    def g(self) -> int:
        return len(self.level_names)

    @property
    def d(self) -> int:
        return self.term.dimension

    def to_dict(self) -> Dict[str, Any]:
        return {
            "inner_terms": list(self.term.inner_terms),
            "include_intercept": self.term.include_intercept,
            "group_expr": list(self.term.group_expr),
            "level_names": list(self.level_names),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReEncoding":
        term = RandomEffectTerm(tuple(data["inner_terms"]), data["include_intercept"], tuple(data["group_expr"]))
        return cls(term=term, level_names=list(data["level_names"]))


@dataclass
class ModelEncoding:
    """Column layout learned from the fitting data."""
    formula: FormulaAst
    fixed_columns: List[FixedColumn]
    re_encodings: List[ReEncoding]
    fe_variables: List[str]
    standardize: bool = False

    @property
    def fixed_names(self) -> List[str]:
        return [c.name for c in self.fixed_columns]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "formula": self.formula.to_dict(),
            "fixed_columns": [c.to_dict() for c in self.fixed_columns],
            "re_encodings": [r.to_dict() for r in self.re_encodings],
            "fe_variables": list(self.fe_variables),
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelEncoding":
        return cls(
            formula=FormulaAst.from_dict(data["formula"]),
            fixed_columns=[FixedColumn.from_dict(c) for c in data["fixed_columns"]],
            re_encodings=[ReEncoding.from_dict(r) for r in data["re_encodings"]],
            fe_variables=list(data["fe_variables"]),
            standardize=data.get("standardize", False),
        )


@dataclass(eq=False)
class ReBlock:
    """``Z_j``: row i holds ``basis[i]`` in the column span of level ``levels[i]``."""
    term: RandomEffectTerm
    Z: sparse.csr_matrix
    levels: np.ndarray
    basis: np.ndarray
    level_names: List[str]

    @property
    def g(self) -> int:
        return len(self.level_names)

    @property
    def d(self) -> int:
        return self.term.dimension


@dataclass(eq=False)
class FeBlock:
    """One-hot indicator block constrained to ``1' gamma = 0``."""
    variable: str
    F: sparse.csr_matrix
    index: np.ndarray
    level_names: List[str]

    @property
    def size(self) -> int:
        return len(self.level_names)

    @property
    def constraint(self) -> np.ndarray:
        return np.ones(self.size)


@dataclass(eq=False)
class DesignSet:
    X: sparse.csr_matrix
    re_blocks: List[ReBlock]
    fe_blocks: List[FeBlock]
    encoding: ModelEncoding
    col_maps: Dict[str, Dict[int, str]] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def linear_predictor(self, beta: np.ndarray, alphas: Sequence[np.ndarray],
                         gammas: Sequence[np.ndarray] = ()) -> np.ndarray:
        """``X beta + sum_j Z_j alpha_j + sum_k F_k gamma_k`` for flat coefficient vectors."""
        eta = self.X @ beta if self.p else np.zeros(self.n_rows)
        for block, alpha in zip(self.re_blocks, alphas):
            eta = eta + block.Z @ np.ravel(alpha)
        for block, gamma in zip(self.fe_blocks, gammas):
            eta = eta + np.asarray(gamma)[block.index]
        return eta


def _frame(data: Union[AugmentedTable, pd.DataFrame]) -> pd.DataFrame:
    return data.frame if isinstance(data, AugmentedTable) else data


def _is_categorical(values: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(values) or isinstance(values.dtype, pd.CategoricalDtype)


def _levels_of(values: pd.Series) -> List[str]:
    if isinstance(values.dtype, pd.CategoricalDtype):
        present = set(values.astype(str).unique())
        return [str(c) for c in values.cat.categories if str(c) in present]
    return sorted(values.astype(str).unique())


def _group_keys(frame: pd.DataFrame, group_expr: Sequence[str]) -> pd.Series:
    keys = frame[group_expr[0]].astype(str)
    for name in group_expr[1:]:
        keys = keys + LEVEL_SEPARATOR + frame[name].astype(str)
    return keys.reset_index(drop=True)


def _require(frame: pd.DataFrame, ast: FormulaAst, include_fe: bool) -> None:
    needed = list(ast.fixed_terms) + [v for t in ast.re_terms for v in t.variables]
    if include_fe:
        needed += list(ast.fe_terms)
    missing = [v for v in dict.fromkeys(needed) if v not in frame.columns]
    if missing:
        raise DesignError(f"unknown variable(s) in formula: {', '.join(missing)}")


def learn_encoding(ast: FormulaAst, data: Union[AugmentedTable, pd.DataFrame],
                   standardize: bool = False) -> ModelEncoding:
    """Decide the column layout of every block from the fitting data."""
    frame = _frame(data)
    ast = ast.canonical()
    _require(frame, ast, include_fe=True)

    fixed: List[FixedColumn] = []
    if ast.intercept:
        fixed.append(FixedColumn(name="(Intercept)", kind="intercept"))
    for variable in ast.fixed_terms:
        values = frame[variable]
        if _is_categorical(values):
            levels = _levels_of(values)
            if len(levels) < 2:
                raise DesignError(f"categorical fixed term {variable!r} has a single level {levels}")
            for level in levels[:-1]:
                fixed.append(FixedColumn(name=f"{variable}[{level}]", kind="effect",
                                         variable=variable, level=level, levels=levels))
        else:
            scale = 1.0
            if standardize:
                sd = float(values.std(ddof=0))
                scale = sd if sd > 0 else 1.0
            fixed.append(FixedColumn(name=variable, kind="numeric", variable=variable, scale=scale))

    re_encodings = []
    for term in ast.re_terms:
        for inner in term.inner_terms:
            if _is_categorical(frame[inner]):
                raise DesignError(f"random-effect covariate {inner!r} in {term.label} must be numeric")
        level_names = sorted(_group_keys(frame, term.group_expr).unique())
        if len(level_names) == 1:
            logger.warning("random effect %s has a single level %r", term.label, level_names[0])
        re_encodings.append(ReEncoding(term=term, level_names=level_names))

    return ModelEncoding(formula=ast, fixed_columns=fixed, re_encodings=re_encodings,
                         fe_variables=list(ast.fe_terms), standardize=standardize)


def _fixed_matrix(frame: pd.DataFrame, columns: Sequence[FixedColumn]) -> sparse.csr_matrix:
    n = len(frame)
    out = []
    for column in columns:
        if column.kind == "intercept":
            out.append(np.ones(n))
        elif column.kind == "numeric":
            out.append(frame[column.variable].to_numpy(dtype=float) / column.scale)
        else:
            values = frame[column.variable].astype(str).to_numpy()
            unknown = ~np.isin(values, column.levels)
            if unknown.any():
                raise DesignError(
                    f"unseen level {values[np.flatnonzero(unknown)[0]]!r} of fixed term {column.variable!r}"
                )
            out.append((values == column.level).astype(float) - (values == column.levels[-1]).astype(float))
    if not out:
        return sparse.csr_matrix((n, 0))
    return sparse.csr_matrix(np.column_stack(out))


def _re_block(frame: pd.DataFrame, encoding: ReEncoding, allow_unseen: bool) -> ReBlock:
    term = encoding.term
    n = len(frame)
    keys = _group_keys(frame, term.group_expr)
    lookup = {name: k for k, name in enumerate(encoding.level_names)}
    levels = keys.map(lookup).fillna(-1).to_numpy(dtype=np.int64)
    unseen = levels < 0
    if unseen.any():
        if not allow_unseen:
            raise DesignError(f"unseen level {keys[np.flatnonzero(unseen)[0]]!r} of {term.label}")
        logger.info("%d row(s) with unseen levels of %s contribute the prior mean", int(unseen.sum()), term.label)

    slots = [np.ones(n)] if term.include_intercept else []
    slots += [frame[name].to_numpy(dtype=float) for name in term.inner_terms]
    basis = np.column_stack(slots) if slots else np.zeros((n, 0))

    d = term.dimension
    seen = np.flatnonzero(~unseen)
    rows = np.repeat(seen, d)
    cols = (levels[seen, None] * d + np.arange(d)).ravel()
    Z = sparse.csr_matrix((basis[seen].ravel(), (rows, cols)), shape=(n, encoding.g * d))
    return ReBlock(term=term, Z=Z, levels=levels, basis=basis, level_names=list(encoding.level_names))


def _fe_block(frame: pd.DataFrame, variable: str) -> FeBlock:
    index, uniques = pd.factorize(frame[variable].astype(str), sort=True)
    n = len(frame)
    F = sparse.csr_matrix((np.ones(n), (np.arange(n), index)), shape=(n, len(uniques)))
    return FeBlock(variable=variable, F=F, index=index.astype(np.int64), level_names=[str(u) for u in uniques])


def encode_rows(encoding: ModelEncoding, data: Union[AugmentedTable, pd.DataFrame],
                include_fe: bool = True, allow_unseen: bool = False) -> DesignSet:
    """Build blocks for ``data`` with a previously learned encoding.

    With ``allow_unseen`` random-effect levels absent from the encoding get no
    column (their coefficient is the prior mean 0).  Fixed-effect blocks are
    built from the levels present in ``data``.
    """
    frame = _frame(data).reset_index(drop=True)
    _require(frame, encoding.formula, include_fe)
    X = _fixed_matrix(frame, encoding.fixed_columns)
    re_blocks = [_re_block(frame, r, allow_unseen) for r in encoding.re_encodings]
    fe_blocks = [_fe_block(frame, v) for v in encoding.fe_variables] if include_fe else []

    col_maps = {"X": dict(enumerate(encoding.fixed_names))}
    for block in re_blocks:
        col_maps[block.term.label] = {
            k * block.d + s: f"{level}/{slot}"
            for k, level in enumerate(block.level_names)
            for s, slot in enumerate(block.term.slot_names)
        }
    for block in fe_blocks:
        col_maps[f"v_fe({block.variable})"] = dict(enumerate(block.level_names))
    return DesignSet(X=X, re_blocks=re_blocks, fe_blocks=fe_blocks, encoding=encoding, col_maps=col_maps)


def build_designs(ast: FormulaAst, data: Union[AugmentedTable, pd.DataFrame], standardize: bool = False) -> DesignSet:
    """Learn the encoding from ``data`` and build every block for it."""
    return encode_rows(learn_encoding(ast, data, standardize), data)


def response_vector(ast: FormulaAst, data: Union[AugmentedTable, pd.DataFrame]) -> np.ndarray:
    frame = _frame(data)
    if ast.response not in frame.columns:
        raise DesignError(f"unknown response variable {ast.response!r}")
    y = frame[ast.response].to_numpy(dtype=float)
    if (y < 0).any() or not np.isfinite(y).all():
        raise DesignError(f"response {ast.response!r} must hold finite non-negative counts")
    return y


@dataclass
class RankReport:
    rank: int
    p: int
    aliases: Dict[str, List[str]] = field(default_factory=dict)
    checked: bool = True

    @property
    def full_rank(self) -> bool:
        return self.rank == self.p

    def message(self) -> str:
        if not self.checked:
            return f"rank check skipped for p = {self.p}"
        if self.full_rank:
            return f"full column rank {self.p}"
        parts = [f"{name} ~ {', '.join(others) or '0'}" for name, others in self.aliases.items()]
        return f"rank {self.rank} < {self.p}: aliased columns {'; '.join(parts)}"


def check_rank(X: Union[sparse.spmatrix, np.ndarray], names: Optional[Sequence[str]] = None) -> RankReport:
    """Advisory rank check via column-pivoted QR, naming aliased columns."""
    p = X.shape[1]
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    if p > RANK_CHECK_LIMIT:
        logger.warning("skipping rank check for %d columns", p)
        return RankReport(rank=p, p=p, checked=False)
    if p == 0:
        return RankReport(rank=0, p=0)

    dense = X.toarray() if sparse.issparse(X) else np.asarray(X, dtype=float)
    R, pivot = linalg.qr(dense, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(dense.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))

    aliases = {}
    basis = pivot[:rank]
    for column in pivot[rank:]:
        coef, *_ = np.linalg.lstsq(dense[:, basis], dense[:, column], rcond=None)
        aliases[names[column]] = [names[b] for b, c in zip(basis, coef) if abs(c) > 1e-8]
    report = RankReport(rank=rank, p=p, aliases=aliases)
    if not report.full_rank:
        logger.warning(report.message())
    return report


def dump_designs(designs: DesignSet, directory: Union[str, Path]) -> List[Path]:
    """Write each block in Matrix Market format for inspection of sparsity patterns.

    Column names of every block go to ``columns.csv`` (block, file, column, name).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    names = []

    def _write(name: str, matrix: sparse.spmatrix, block: str, comment: str) -> None:
        path = directory / f"{name}.mtx"
        spio.mmwrite(str(path), sparse.coo_matrix(matrix), comment=comment)
        written.append(path)
        names.extend((block, path.name, column, label) for column, label in designs.col_maps[block].items())

    _write("X", designs.X, "X", " ".join(designs.encoding.fixed_names))
    for j, block in enumerate(designs.re_blocks):
        _write(f"Z_{j}", block.Z, block.term.label, f"{block.term.label} g={block.g} d={block.d}")
    for k, block in enumerate(designs.fe_blocks):
        _write(f"F_{k}", block.F, f"v_fe({block.variable})", f"v_fe({block.variable})")

    columns_path = directory / "columns.csv"
    pd.DataFrame(names, columns=["block", "file", "column", "name"]).to_csv(columns_path, index=False,
                                                                           encoding="utf-8")
    written.append(columns_path)
    return written
