import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from mvmrp.config import (EstimatorKind, RunConfig, RunConfigProvider, TruthSource, parse_questions)
from mvmrp.data import (AltCovariateTable, PostStratFrame, TableSchema, expand_augmented, expand_poststrat,
                        load_poststrat, load_table)
from mvmrp.design import build_designs, check_rank, dump_designs, response_vector
from mvmrp.engine import coefficient_table, fit, load_state, save_state
from mvmrp.errors import DataError, FormulaError, NumericalError
from mvmrp.estimators import EstimatorConfig, default_factory
from mvmrp.formula import FormulaAst, format_formula, parse_formula
from mvmrp.poststrat import aggregate, predict_cells, predictions_frame
from mvmrp.simulate import GeneratorSpec, default_formulas, generate_superpoll, run_validation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Malformed or missing command-line arguments."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_json(success: bool, message: str, **details: Any) -> None:
    """Helper function to format JSON output."""
    result = {"success": success, "message": message, **details}
    print(json.dumps(result, indent=2, default=str))


def build_run_config(args) -> RunConfig:
    """Create RunConfig from the config file, then apply command-line overrides."""
    config = RunConfigProvider(Path(args.config)).get_run_config() if args.config else RunConfig()
    overrides: Dict[str, Any] = {}
    if getattr(args, "formula", None):
        overrides["formula"] = args.formula
    if getattr(args, "questions", None):
        overrides["questions"] = parse_questions(args.questions)
    if getattr(args, "data", None):
        overrides["survey_path"] = Path(args.data)
    if getattr(args, "poststrat", None):
        overrides["poststrat_path"] = Path(args.poststrat)
    if getattr(args, "state", None):
        overrides["state_path"] = Path(args.state)
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = Path(args.out_dir)
    if getattr(args, "estimator", None):
        overrides["estimator"] = EstimatorKind.from_string(args.estimator)
    if getattr(args, "geography", None):
        overrides["geography"] = args.geography
    if getattr(args, "variance_adjusted", False):
        overrides["variance_adjusted"] = True
    if getattr(args, "dump_designs", False):
        overrides["dump_designs"] = True

    solver = config.solver
    if getattr(args, "max_iter", None) is not None:
        solver = replace(solver, max_iter=args.max_iter)
    if getattr(args, "tol", None) is not None:
        solver = replace(solver, elbo_rel_tol=args.tol)
    overrides["solver"] = solver

    simulation = config.simulation
    for flag, name in (("replications", "replications"), ("sample_size", "sample_size"),
                       ("seed", "seed"), ("jobs", "jobs")):
        value = getattr(args, flag, None)
        if value is not None:
            simulation = replace(simulation, **{name: value})
    if getattr(args, "truth", None):
        simulation = replace(simulation, truth=TruthSource.from_string(args.truth))
    if getattr(args, "sampling_bias", None) is not None:
        simulation = replace(simulation, sampling_bias=args.sampling_bias)
    if getattr(args, "independent_questions", False):
        simulation = replace(simulation, independent_questions=True)
    overrides["simulation"] = simulation
    return replace(config, **overrides)


def _require(config: RunConfig, *fields: str) -> None:
    flags = {"formula": "--formula", "questions": "--questions", "survey_path": "--data",
             "poststrat_path": "--poststrat", "state_path": "--state"}
    missing = [flags[f] for f in fields if not getattr(config, f)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _key_columns(config: RunConfig, ast: Optional[FormulaAst] = None) -> List[str]:
    keys = [key for spec in config.alt_covariates for key in spec.keys]
    keys += [config.geography, config.cell_id]
    if ast is not None:
        keys += ast.grouping_columns()
    return keys


def _survey_schema(config: RunConfig, ast: Optional[FormulaAst] = None) -> TableSchema:
    factors = dict(config.schema.factors)
    factors.update({q.name: list(q.levels) for q in config.questions})
    return replace(config.schema, factors=factors).with_keys(_key_columns(config, ast))


def _poststrat_schema(config: RunConfig, ast: Optional[FormulaAst] = None) -> TableSchema:
    question_names = {q.name for q in config.questions}
    factors = {c: levels for c, levels in config.schema.factors.items() if c not in question_names}
    return replace(config.schema, factors=factors).with_keys(_key_columns(config, ast))


def _alt_covariates(config: RunConfig) -> List[AltCovariateTable]:
    return [
        AltCovariateTable.load(spec.path, spec.keys, spec.question, spec.columns, config.schema.delimiter)
        for spec in config.alt_covariates
    ]


def _load_poststrat(config: RunConfig, ast: Optional[FormulaAst] = None) -> PostStratFrame:
    return load_poststrat(config.poststrat_path, _poststrat_schema(config, ast), config.cell_id,
                          config.geography, config.poststrat_weight)


def _by(args) -> List[str]:
    return [c.strip() for c in args.by.split(",")] if getattr(args, "by", None) else ["geography"]


def _write_report(out_dir: Path, predictions, questions, by) -> Dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    report = aggregate(predictions, questions, by)
    paths = {"predictions": out_dir / "predictions.csv", "qoi_csv": out_dir / "qoi.csv",
             "qoi_json": out_dir / "qoi.json"}
    predictions_frame(predictions, questions).to_csv(paths["predictions"], index=False, encoding="utf-8")
    report.to_frame().to_csv(paths["qoi_csv"], index=False, encoding="utf-8")
    paths["qoi_json"].write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


def handle_check_formula(args) -> int:
    if not args.formula:
        raise UsageError("--formula is required")
    ast = parse_formula(args.formula)
    output_json(True, "Formula parsed", ast=ast.to_dict(), canonical=format_formula(ast.canonical()))
    return EXIT_OK


def handle_fit(args) -> int:
    config = build_run_config(args)
    _require(config, "formula", "questions", "survey_path")
    if config.estimator not in (EstimatorKind.MVMRP, EstimatorKind.PP_OVA):
        raise UsageError(f"fit saves a single state; use poststratify for estimator {config.estimator.value}")
    ast = parse_formula(config.formula)
    if config.estimator is EstimatorKind.PP_OVA:
        ast = ast.without_fe()

    survey = load_table(config.survey_path, _survey_schema(config, ast))
    augmented = expand_augmented(survey, config.questions, _alt_covariates(config))
    designs = build_designs(ast, augmented, config.standardize)
    rank = check_rank(designs.X, designs.encoding.fixed_names)
    state = fit(designs, response_vector(ast, augmented), config.solver)

    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("writing state and traces to %s", out_dir)
    save_state(state, out_dir / "state.json")
    pd.DataFrame({"iteration": range(len(state.elbo_trace)), "elbo": state.elbo_trace}).to_csv(
        out_dir / "elbo_trace.csv", index=False, float_format="%.17g", encoding="utf-8")
    coefficient_table(state).to_csv(out_dir / "coefficients.csv", index=False, encoding="utf-8")
    if config.dump_designs:
        dump_designs(designs, out_dir / "designs")

    output_json(True, "Model fitted" if state.converged else "Model fitted without converging",
                converged=state.converged, iterations=state.iterations, elbo=state.elbo,
                damping_events=state.damping_events, dropped_rows=survey.dropped_rows,
                rank=rank.message(), out_dir=str(out_dir))
    return EXIT_OK


def handle_predict(args) -> int:
    config = build_run_config(args)
    _require(config, "questions", "poststrat_path")
    state_path = config.state_path or config.out_dir / "state.json"
    state = load_state(state_path)
    expanded = expand_poststrat(_load_poststrat(config, state.encoding.formula), config.questions,
                                _alt_covariates(config))
    predictions = predict_cells(state, expanded, config.variance_adjusted)
    paths = _write_report(config.out_dir, predictions, config.questions, _by(args))
    output_json(True, "Cells post-stratified", cells=len(predictions), files=paths)
    return EXIT_OK


def handle_poststratify(args) -> int:
    config = build_run_config(args)
    _require(config, "formula", "questions", "survey_path", "poststrat_path")
    if config.estimator is EstimatorKind.TRUTH:
        raise UsageError("the truth estimator is only available in simulate")
    ast = parse_formula(config.formula)
    estimator_config = EstimatorConfig(
        formula=ast, questions=list(config.questions), solver=config.solver,
        alt_covariates=_alt_covariates(config), standardize=config.standardize,
        variance_adjusted=config.variance_adjusted, jobs=config.simulation.jobs,
    )
    estimator = default_factory().create_estimator(config.estimator, estimator_config)
    survey = load_table(config.survey_path, _survey_schema(config, ast))
    predictions = estimator.fit(survey).predict(_load_poststrat(config, ast))
    paths = _write_report(config.out_dir, predictions, config.questions, _by(args))
    output_json(True, f"Fitted {config.estimator.value} and post-stratified", cells=len(predictions),
                files=paths)
    return EXIT_OK


def handle_simulate(args) -> int:
    config = build_run_config(args)
    options = config.simulation
    spec = GeneratorSpec(seed=options.seed, replications=options.replications, sample_size=options.sample_size,
                         geographies=options.geographies, superpoll_size=options.superpoll_size,
                         sampling_bias=options.sampling_bias, independent_questions=options.independent_questions)
    runs = default_formulas()
    if config.formula:
        runs["mvmrp"] = (EstimatorKind.MVMRP, config.formula)
    unknown = [name for name in options.estimators if name not in runs]
    if unknown:
        raise UsageError(f"unknown simulation run(s): {', '.join(unknown)}")
    runs = {name: runs[name] for name in options.estimators}
    if getattr(args, "estimator", None):
        runs = {name: run for name, run in runs.items() if run[0] is config.estimator}
    for _, formula in runs.values():
        parse_formula(formula)

    result = run_validation(spec, runs, config.solver, options.truth, options.reference, options.jobs,
                            superpoll=generate_superpoll(spec))
    paths = result.write(config.out_dir)
    output_json(True, "Validation finished", failures=result.failures, unconverged=result.unconverged,
                files=[str(p) for p in paths],
                summary=result.summary.to_dict(orient="records"))
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='Path to a YAML run configuration')
    parser.add_argument('--out-dir', dest='out_dir', help='Output directory (default: out)')
    parser.add_argument('--verbose', action='store_true', help='Log progress at INFO level')


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--formula', help='Model formula, e.g. "response ~ v_fe(case_id) + choice + (1 | state : choice)"')
    parser.add_argument('--questions', help='Questions as name=level1,level2;name2=level1,level2')
    parser.add_argument('--estimator', choices=[k.value for k in EstimatorKind], help='Estimator (default: mvmrp)')
    parser.add_argument('--max-iter', dest='max_iter', type=int, help='Maximum CAVI sweeps (default: 500)')
    parser.add_argument('--tol', type=float, help='Relative ELBO tolerance (default: 1e-8)')


def create_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog='mvmrp',
        description='Multivariate multilevel regression and post-stratification',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Example usage:
  # Check a formula:
  mvmrp check-formula --formula "response ~ v_fe(case_id) + choice + (1 | state : choice)"

  # Fit and save the variational state:
  mvmrp fit --data survey.csv --questions "partyID=D,R,I;policy=support,oppose" \\
      --formula "response ~ v_fe(case_id) + choice + (1 | state : choice)" --out-dir out

  # Post-stratify a saved state:
  mvmrp predict --state out/state.json --poststrat cells.csv --questions "partyID=D,R,I;policy=support,oppose"

  # Fit a baseline and post-stratify in one step:
  mvmrp poststratify --estimator naive --config run.yml

  # Synthetic validation loop:
  mvmrp simulate --replications 50 --seed 7 --jobs 4 --out-dir sim
    """
    )
    subparsers = parser.add_subparsers(dest='command', parser_class=_ArgumentParser)

    check = subparsers.add_parser('check-formula', help='Parse a formula and print its structure')
    check.add_argument('--formula', help='Model formula')
    _add_common(check)

    fit_parser = subparsers.add_parser('fit', help='Fit the model and save the variational state')
    _add_common(fit_parser)
    _add_model(fit_parser)
    fit_parser.add_argument('--data', help='Survey file (delimited text with header)')
    fit_parser.add_argument('--dump-designs', dest='dump_designs', action='store_true',
                            help='Write design blocks in Matrix Market format')

    predict = subparsers.add_parser('predict', help='Post-stratify a saved state')
    _add_common(predict)
    predict.add_argument('--state', help='Saved state (default: <out-dir>/state.json)')
    predict.add_argument('--poststrat', help='Post-stratification frame')
    predict.add_argument('--questions', help='Questions as name=level1,level2;name2=level1,level2')
    predict.add_argument('--geography', help='Geography column of the frame (default: geography)')
    predict.add_argument('--by', help='Comma-separated grouping columns (default: geography)')
    predict.add_argument('--variance-adjusted', dest='variance_adjusted', action='store_true',
                         help='Add half the linear predictor variance before the softmax')

    poststratify = subparsers.add_parser('poststratify', help='Fit any estimator and post-stratify')
    _add_common(poststratify)
    _add_model(poststratify)
    poststratify.add_argument('--data', help='Survey file')
    poststratify.add_argument('--poststrat', help='Post-stratification frame')
    poststratify.add_argument('--geography', help='Geography column of the frame (default: geography)')
    poststratify.add_argument('--by', help='Comma-separated grouping columns (default: geography)')
    poststratify.add_argument('--jobs', type=int, help='Parallel per-category fits')
    poststratify.add_argument('--variance-adjusted', dest='variance_adjusted', action='store_true',
                              help='Add half the linear predictor variance before the softmax')

    simulate = subparsers.add_parser('simulate', help='Run the synthetic validation loop')
    _add_common(simulate)
    _add_model(simulate)
    simulate.add_argument('--truth', choices=[t.value for t in TruthSource], help='Ground truth (default: generative)')
    simulate.add_argument('--replications', type=int, help='Replications (default: 50)')
    simulate.add_argument('--sample-size', dest='sample_size', type=int, help='Respondents per sample (default: 2000)')
    simulate.add_argument('--seed', type=int, help='Random seed (default: 0)')
    simulate.add_argument('--jobs', type=int, help='Parallel replications (default: 1)')
    simulate.add_argument('--sampling-bias', dest='sampling_bias', type=float,
                          help='Log-scale sd of cell inclusion propensities (default: 0, simple random sampling)')
    simulate.add_argument('--independent-questions', dest='independent_questions', action='store_true',
                          help='Generate answers independent across questions within each cell')
    return parser


HANDLERS = {
    'check-formula': handle_check_formula,
    'fit': handle_fit,
    'predict': handle_predict,
    'poststratify': handle_poststratify,
    'simulate': handle_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as e:
        output_json(False, f"Usage error: {e}", usage=parser.format_usage().strip())
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return HANDLERS[args.command](args)
    except (UsageError, FormulaError) as e:
        output_json(False, f"Usage error: {e}")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        output_json(False, f"Data error: {e}")
        return EXIT_DATA
    except NumericalError as e:
        output_json(False, f"Numerical error: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        output_json(False, f"Error: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
