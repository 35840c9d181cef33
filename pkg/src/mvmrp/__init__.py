from .data import QuestionSpec, TableSchema, expand_augmented, expand_poststrat, load_poststrat, load_table
from .design import build_designs, check_rank, response_vector
from .engine import SolverConfig, VariationalState, fit, load_state, save_state
from .errors import DataError, DesignError, FormulaError, MvmrpError, NumericalError
from .formula import format_formula, parse_formula
from .poststrat import QoiReport, aggregate, predict_cells

__all__ = [
    "QuestionSpec", "TableSchema", "expand_augmented", "expand_poststrat", "load_poststrat", "load_table",
    "build_designs", "check_rank", "response_vector",
    "SolverConfig", "VariationalState", "fit", "load_state", "save_state",
    "DataError", "DesignError", "FormulaError", "MvmrpError", "NumericalError",
    "format_formula", "parse_formula",
    "QoiReport", "aggregate", "predict_cells",
]
