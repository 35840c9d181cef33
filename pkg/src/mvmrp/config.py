from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import QuestionSpec, TableSchema
from .engine import ConvergenceMetric, SolverConfig


class EstimatorKind(Enum):
    """Supported estimators."""
    MVMRP = "mvmrp"
    PP_OVA = "pp-ova"
    SEPARATE = "separate"
    NAIVE = "naive"
    TRUTH = "truth"

    @classmethod
    def from_string(cls, value: str) -> 'EstimatorKind':
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Unsupported estimator: {value}")


class TruthSource(Enum):
    """Where simulation ground truth comes from."""
    GENERATIVE = "generative"
    SUPERPOLL = "superpoll"

    @classmethod
    def from_string(cls, value: str) -> 'TruthSource':
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Unsupported truth source: {value}")


@dataclass
class AltCovariateSpec:
    """Alternative-specific covariate file keyed by case-level columns and one question."""
    path: Path
    keys: List[str]
    question: str
    columns: List[str]


@dataclass
class SimulationOptions:
    replications: int = 50
    sample_size: int = 2000
    seed: int = 0
    jobs: int = 1
    truth: TruthSource = TruthSource.GENERATIVE
    reference: str = "mvmrp"
    estimators: List[str] = field(default_factory=lambda: ["mvmrp", "mvmrp-nocopart", "pp-ova", "naive"])
    geographies: int = 50
    superpoll_size: int = 150000
    sampling_bias: float = 0.0
    independent_questions: bool = False


@dataclass
class RunConfig:
    """Configuration for a fit, prediction or simulation run."""
    formula: Optional[str] = None
    questions: List[QuestionSpec] = field(default_factory=list)
    survey_path: Optional[Path] = None
    poststrat_path: Optional[Path] = None
    state_path: Optional[Path] = None
    out_dir: Path = Path("out")
    alt_covariates: List[AltCovariateSpec] = field(default_factory=list)
    schema: TableSchema = field(default_factory=TableSchema)
    cell_id: str = "cell_id"
    geography: str = "geography"
    poststrat_weight: str = "weight"
    estimator: EstimatorKind = EstimatorKind.MVMRP
    standardize: bool = False
    variance_adjusted: bool = False
    dump_designs: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationOptions = field(default_factory=SimulationOptions)


def parse_questions(text: str) -> List[QuestionSpec]:
    """Parse ``name=l1,l2;name2=l1,l2,l3`` into question specs."""
    if not text:
        return []
    questions = []
    for part in text.split(';'):
        part = part.strip()
        if not part:
            continue
        if '=' not in part:
            raise ValueError(f"Invalid question declaration {part!r}, expected name=level1,level2")
        name, levels = part.split('=', 1)
        questions.append(QuestionSpec(name.strip(), tuple(level.strip() for level in levels.split(','))))
    return questions


def _path(value: Optional[str], base: Path) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


class RunConfigProvider:
    """Reads a :class:`RunConfig` from a YAML file.

    Relative paths are resolved against the directory holding the file.
    """
    def __init__(self, config_path: Path):
        self.config_path = Path(config_path)

    def load(self) -> Dict[str, Any]:
        if not self.config_path.exists():
            raise FileNotFoundError(f"Configuration file not found at {self.config_path}")
        with open(self.config_path, 'r', encoding='utf-8') as f:
            try:
                config_data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ValueError(f"Invalid YAML in {self.config_path}: {e}")
        if config_data is None:
            return {}
        if not isinstance(config_data, dict):
            raise ValueError(f"Invalid YAML in {self.config_path}: expected a mapping of sections")
        return config_data

    def get_run_config(self) -> RunConfig:
        config_data = self.load()
        base = self.config_path.parent
        data = config_data.get('data', {}) or {}
        model = config_data.get('model', {}) or {}
        solver = config_data.get('solver', {}) or {}
        simulate = config_data.get('simulate', {}) or {}
        output = config_data.get('output', {}) or {}

        questions = [
            QuestionSpec(name, tuple(str(level) for level in levels))
            for name, levels in (config_data.get('questions', {}) or {}).items()
        ]
        alt_covariates = [
            AltCovariateSpec(
                path=_path(entry['path'], base),
                keys=list(entry.get('keys', [])),
                question=entry['question'],
                columns=list(entry['columns']),
            )
            for entry in config_data.get('alt_covariates', []) or []
        ]
        factors = data.get('factors', {}) or {}
        schema = TableSchema(
            case_id=data.get('case_id', 'case_id'),
            factors={name: (list(map(str, levels)) if levels else None) for name, levels in factors.items()},
            numerics=list(data.get('numerics', [])),
            weight=data.get('survey_weight'),
            delimiter=data.get('delimiter', ','),
        )
        defaults = SimulationOptions()
        return RunConfig(
            formula=model.get('formula'),
            questions=questions,
            survey_path=_path(data.get('survey'), base),
            poststrat_path=_path(data.get('poststrat'), base),
            state_path=_path(data.get('state'), base),
            out_dir=_path(output.get('out_dir', 'out'), base),
            alt_covariates=alt_covariates,
            schema=schema,
            cell_id=data.get('cell_id', 'cell_id'),
            geography=data.get('geography', 'geography'),
            poststrat_weight=data.get('weight', 'weight'),
            estimator=EstimatorKind.from_string(model.get('estimator', 'mvmrp')),
            standardize=bool(model.get('standardize', False)),
            variance_adjusted=bool(model.get('variance_adjusted', False)),
            dump_designs=bool(output.get('dump_designs', False)),
            solver=SolverConfig(
                max_iter=int(solver.get('max_iter', 500)),
                elbo_rel_tol=float(solver.get('tol', 1e-8)),
                max_halvings=int(solver.get('max_halvings', 10)),
                prior_df=float(solver['prior_df']) if solver.get('prior_df') is not None else None,
                prior_scale=float(solver.get('prior_scale', 1.0)),
                term_priors={
                    label: (float(entry['df']), float(entry.get('scale', 1.0)))
                    for label, entry in (solver.get('term_priors', {}) or {}).items()
                },
                metric=ConvergenceMetric.from_string(solver.get('metric', 'elbo')),
                corrected_fe_entropy=bool(solver.get('corrected_fe_entropy', True)),
            ),
            simulation=SimulationOptions(
                replications=int(simulate.get('replications', defaults.replications)),
                sample_size=int(simulate.get('sample_size', defaults.sample_size)),
                seed=int(simulate.get('seed', defaults.seed)),
                jobs=int(simulate.get('jobs', defaults.jobs)),
                truth=TruthSource.from_string(simulate.get('truth', defaults.truth.value)),
                reference=simulate.get('reference', defaults.reference),
                estimators=list(simulate.get('estimators', defaults.estimators)),
                geographies=int(simulate.get('geographies', defaults.geographies)),
                superpoll_size=int(simulate.get('superpoll_size', defaults.superpoll_size)),
                sampling_bias=float(simulate.get('sampling_bias', defaults.sampling_bias)),
                independent_questions=bool(simulate.get('independent_questions', defaults.independent_questions)),
            ),
        )
