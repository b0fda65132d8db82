from pathlib import Path
from typing import Callable, Dict, List, Optional
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd

from ..categorical.analyzer import RECORD_COLUMNS, empirical_tables, tables_from_joint
from ..categorical.models import JointTable
from ..categorical.optimizer import CategoricalOptimizer
from ..errors import ConfigError, InputError, ParallelOutcomesError
from ..linear_sem.selector import METHODS
from ..pipeline import RawTable, run_linear_workflow
from ..simgen import LinearDesign, ReplicationManager, categorical_design, gen_categorical, gen_linear
from ..simgen.manager import TABLES
from .config import DESIGNS, LOG_LEVELS, STARTS, RunConfig, resolve_config
from .reports import (categorical_document, linear_document, replication_document, to_jsonable, write_atomic,
                      write_report)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_ESTIMATION = 3
EXIT_REPLICATION = 4
MAX_FAILURE_RATE = 0.05
MAX_LISTED_LINES = 10
POPULATION_COLUMNS = RECORD_COLUMNS + ['prob']


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _read_text_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, skipinitialspace=True, skip_blank_lines=False)
    except FileNotFoundError:
        raise InputError(f"Input file not found: {path}")
    except pd.errors.EmptyDataError:
        raise InputError(f"Input file {path} is empty")
    except pd.errors.ParserError as e:
        raise InputError(f"Could not parse {path}: {str(e)}")


def _malformed(path: str, bad: pd.Series, reason: str) -> InputError:
    # Header is line 1.
    lines = (np.flatnonzero(bad.to_numpy()) + 2).tolist()
    shown = ', '.join(str(line) for line in lines[:MAX_LISTED_LINES])
    more = f" and {len(lines) - MAX_LISTED_LINES} more" if len(lines) > MAX_LISTED_LINES else ''
    return InputError(f"{path}: {reason} at lines {shown}{more}", details={'lines': lines})


def _require_header(path: str, frame: pd.DataFrame, columns: List[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: header is missing columns {missing} (found {list(frame.columns)})",
                         details={'missing_columns': missing})


def read_categorical_samples(path: str) -> pd.DataFrame:
    """Records x, y1, y2, y3 of 1-based integer labels."""
    raw = _read_text_csv(path)
    _require_header(path, raw, RECORD_COLUMNS)
    values = raw[RECORD_COLUMNS].apply(pd.to_numeric, errors='coerce')
    bad = values.isna().any(axis=1) | (values % 1 != 0).any(axis=1) | (values < 1).any(axis=1)
    if bad.any():
        raise _malformed(path, bad, "expected positive integer labels")
    return values.astype(int)


def read_population_table(path: str) -> JointTable:
    """Probability table with one row per cell: x, y1, y2, y3, prob."""
    raw = _read_text_csv(path)
    _require_header(path, raw, POPULATION_COLUMNS)
    values = raw[POPULATION_COLUMNS].apply(pd.to_numeric, errors='coerce')
    labels = values[RECORD_COLUMNS]
    bad = values.isna().any(axis=1) | (labels % 1 != 0).any(axis=1) | (labels < 1).any(axis=1) | (values['prob'] < 0)
    if bad.any():
        raise _malformed(path, bad, "expected positive integer labels and a nonnegative probability")
    index = labels.to_numpy(dtype=int) - 1
    prob = np.zeros(tuple(index.max(axis=0) + 1))
    np.add.at(prob, tuple(index.T), values['prob'].to_numpy())
    return JointTable(prob=prob)


def read_numeric_table(path: str) -> pd.DataFrame:
    """Numeric columns; empty cells become missing values, other non-numbers are parse errors."""
    raw = _read_text_csv(path)
    values = raw.apply(pd.to_numeric, errors='coerce')
    bad = (values.isna() & raw.notna() & (raw.apply(lambda c: c.str.strip()) != '')).any(axis=1)
    if bad.any():
        raise _malformed(path, bad, "non-numeric values")
    return values


def _default_output(config: RunConfig, suffix: str) -> str:
    if config.output:
        return config.output
    if config.input:
        return str(Path(config.input).with_suffix('')) + suffix
    return f"{config.command}{suffix}"


def cmd_fit_categorical(config: RunConfig) -> int:
    if config.population:
        tables = tables_from_joint(read_population_table(config.input))
    else:
        tables = empirical_tables(read_categorical_samples(config.input), k_x=config.k_x, k_y=config.k_y)
    rng = np.random.default_rng(config.seed) if config.start == 'random' else None
    result = CategoricalOptimizer(config.categorical_settings()).fit(tables, rng=rng)
    document, text = categorical_document(result, config.as_dict())
    write_report(_default_output(config, '.report.json'), document, text)
    return EXIT_OK if result['status'] == 'success' else result['exit_code']


def cmd_fit_linear(config: RunConfig) -> int:
    raw = RawTable.from_frame(read_numeric_table(config.input), config.exposure, config.outcomes,
                              config.covariates, config.log_columns)
    result = run_linear_workflow(raw, config.linear_settings())
    document, text = linear_document(result, config.as_dict())
    write_report(_default_output(config, '.report.json'), document, text)
    return EXIT_OK if result['status'] == 'success' else result['exit_code']


def cmd_simulate(config: RunConfig) -> int:
    if config.design == 'categorical':
        frame = gen_categorical(config.n, config.seed)
        meta = {'design': 'categorical', 'params': categorical_design().as_dict()}
    else:
        design = LinearDesign(p=config.p)
        data = gen_linear(design, config.n, config.seed)
        frame = pd.DataFrame(data.y, columns=[f'y{j + 1}' for j in range(design.p)])
        frame.insert(0, 'x', data.x)
        meta = {'design': 'linear', 'params': design.as_dict(), 'beta': design.beta, 'alpha': design.alpha,
                'sigma': design.sigma, 'zero_set': design.zero_set + 1, 'var_x': design.var_x(),
                'cov_xy': design.cov_xy()}
    meta.update({'n': config.n, 'seed': config.seed})

    output = Path(config.output or f"{config.design}_n{config.n}_seed{config.seed}.csv")
    write_atomic(output, frame.to_csv(index=False))
    write_atomic(output.with_suffix('.meta.json'), json.dumps(to_jsonable(meta), indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote {len(frame)} {config.design} records to {output}")
    return EXIT_OK


def cmd_replicate(config: RunConfig) -> int:
    outcome = ReplicationManager(config.replication_settings()).run(config.table)
    if outcome['status'] != 'success':
        return outcome['exit_code']
    report = outcome['report']
    document, text = replication_document(report, config.as_dict())
    write_report(config.output or f"{config.table}_report.json", document, text)
    if report.failure_rate > MAX_FAILURE_RATE:
        logger.error(f"{report.failures} of {report.attempted} runs failed "
                     f"({report.failure_rate:.1%} > {MAX_FAILURE_RATE:.0%})")
        return EXIT_REPLICATION
    return EXIT_OK


COMMAND_HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    'fit-categorical': cmd_fit_categorical,
    'fit-linear': cmd_fit_linear,
    'simulate': cmd_simulate,
    'replicate': cmd_replicate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help="YAML file whose values sit between defaults and flags")
    common.add_argument('--log-level', dest='log_level', type=str.upper, choices=LOG_LEVELS)
    common.add_argument('--seed', type=int, help="Seed for every random draw (default: PARALLEL_OUTCOMES_SEED)")
    common.add_argument('--output', help="Report or data file to write")

    parser = _Parser(prog='parallel-outcomes',
                     description="Causal effect estimation with parallel outcomes under unmeasured confounding.")
    sub = parser.add_subparsers(dest='command', required=True)

    cat = sub.add_parser('fit-categorical', parents=[common], help="Categorical model with three outcomes")
    cat.add_argument('--input', help="CSV with columns x,y1,y2,y3 (or x,y1,y2,y3,prob with --population)")
    cat.add_argument('--population', action=argparse.BooleanOptionalAction, default=None,
                     help="Input is an exact probability table rather than samples")
    cat.add_argument('--k-x', dest='k_x', type=int)
    cat.add_argument('--k-y', dest='k_y', type=int, nargs=3)
    cat.add_argument('--start', choices=STARTS, help="GLS start: plug-in warm start or a random point")
    cat.add_argument('--eps-rank', dest='eps_rank', type=float)
    cat.add_argument('--imag-rel-tol', dest='imag_rel_tol', type=float)
    cat.add_argument('--order-tol', dest='order_tol', type=float)
    cat.add_argument('--max-iter', dest='max_iter', type=int)

    lin = sub.add_parser('fit-linear', parents=[common], help="Linear structural equation model")
    lin.add_argument('--input', help="CSV with exposure, outcome and covariate columns")
    lin.add_argument('--exposure')
    lin.add_argument('--outcomes', nargs='+')
    lin.add_argument('--covariates', nargs='+')
    lin.add_argument('--log-columns', dest='log_columns', nargs='+')
    lin.add_argument('--screen', action=argparse.BooleanOptionalAction, default=None)
    lin.add_argument('--num-factors', dest='num_factors', type=int)
    lin.add_argument('--threshold-mult', dest='threshold_mult', type=float)
    lin.add_argument('--pervasive-threshold', dest='pervasive_threshold', action=argparse.BooleanOptionalAction,
                     default=None, help="Add 1/sqrt(p) to the error diagonality rate")

    sim = sub.add_parser('simulate', parents=[common], help="Draw a sample from a simulation design")
    sim.add_argument('--design', choices=DESIGNS)
    sim.add_argument('--n', type=int)
    sim.add_argument('--p', type=int)

    rep = sub.add_parser('replicate', parents=[common], help="Monte Carlo replication of a results table")
    rep.add_argument('--table', choices=TABLES)
    rep.add_argument('--runs', type=int)
    rep.add_argument('--workers', type=int)
    rep.add_argument('--n', type=int, help="Sample size for tableS1")
    rep.add_argument('--full-grid', dest='full_grid', action=argparse.BooleanOptionalAction, default=None,
                     help="Run table2 over every (n, p) cell")

    for estimation in (lin, rep):
        estimation.add_argument('--M', dest='M', type=float, help="Bound on the rotated loadings")
        estimation.add_argument('--method', choices=METHODS)
        estimation.add_argument('--folds', type=int)
        estimation.add_argument('--lambda-min', dest='lambda_min', type=float)
        estimation.add_argument('--lambda-max', dest='lambda_max', type=float)
        estimation.add_argument('--lambda-count', dest='lambda_count', type=int)
        estimation.add_argument('--bootstrap', type=int, help="Bootstrap resamples (0 disables)")
        estimation.add_argument('--level', type=float)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    flags = {k: v for k, v in vars(args).items() if k not in ('command', 'config')}
    try:
        config = resolve_config(args.command, flags, args.config)
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(str(e))
        return e.exit_code

    logging.basicConfig(level=getattr(logging, config.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return COMMAND_HANDLERS[config.command](config)
    except ParallelOutcomesError as e:
        logger.error(f"Error running {config.command}: {str(e)}")
        return e.exit_code
