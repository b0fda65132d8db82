from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np
import pandas as pd

from ..categorical.analyzer import crude_estimate, empirical_tables, g_formula
from ..categorical.models import PotentialOutcomeDist
from ..categorical.optimizer import CategoricalOptimizer
from ..errors import ConfigError, ParallelOutcomesError
from ..linear_sem.optimizer import LinearSEMOptimizer
from .designs import LinearDesign, categorical_design
from .generator import gen_categorical, gen_linear

logger = logging.getLogger(__name__)

TABLES = ('table1', 'table2', 'tableS1')
MIN_RUNS = 10
GRID_N = (500, 1000, 2000)
GRID_P = (30, 60, 100)
S1_SAMPLE_SIZE = 1000
S1_ESTIMANDS = ('pr{Y1(X=1)=1}', 'pr{Y1(X=2)=1}', 'pr{Y2(X=1)=1}', 'pr{Y2(X=2)=1}',
                'pr{Y3(X=1)=1}', 'pr{Y3(X=2)=1}')
S1_ESTIMATORS = ('crude', 'random_start', 'warm_start')

# Published reference values, kept for side-by-side reports.
PUBLISHED_TABLE1 = {  # (n, p): (FPR x 10000, FNR x 10000)
    (500, 30): (58, 0), (500, 60): (16, 0), (500, 100): (10, 0),
    (1000, 30): (54, 0), (1000, 60): (16, 0), (1000, 100): (54, 0),
    (2000, 30): (37, 0), (2000, 60): (12, 0), (2000, 100): (5, 0),
}
PUBLISHED_TABLE2 = {  # (n, p): ((bias x 100, SE x 100) for beta_1..beta_4)
    (500, 30): ((0.75, 0.75), (1.26, 0.98), (-0.52, 1.06), (0.98, 0.79)),
    (1000, 30): ((0.03, 0.60), (0.61, 0.67), (-0.25, 0.88), (0.78, 0.63)),
    (2000, 30): ((-0.68, 0.45), (-0.12, 0.49), (0.03, 0.49), (0.10, 0.36)),
    (500, 60): ((-1.40, 0.74), (0.52, 0.90), (-1.27, 0.94), (1.43, 0.83)),
    (1000, 60): ((-0.58, 0.55), (0.71, 0.55), (-1.81, 0.84), (0.14, 0.60)),
    (2000, 60): ((0.30, 0.40), (0.04, 0.47), (-0.70, 0.58), (0.15, 0.40)),
    (500, 100): ((-0.57, 0.75), (0.91, 0.86), (0.63, 0.93), (0.60, 0.83)),
    (1000, 100): ((-1.06, 0.59), (0.09, 0.70), (1.10, 0.71), (0.62, 0.55)),
    (2000, 100): ((0.47, 0.34), (-0.30, 0.38), (-1.13, 0.54), (0.45, 0.41)),
}
PUBLISHED_TABLE_S1 = {  # estimator: (bias x 100, SD x 100) per estimand, signs as printed
    'crude': ((-4.02, 2.21), (4.06, 2.22), (-2.75, 1.97), (4.08, 2.24), (-4.16, 1.89), (5.47, 2.23)),
    'random_start': ((-2.71, 11.8), (7.43, 12.0), (19.2, 22.0), (5.78, 9.63), (24.5, 22.0), (11.3, 9.36)),
    'warm_start': ((-1.11, 10.4), (2.32, 9.11), (0.87, 9.56), (1.84, 8.85), (0.02, 10.5), (3.19, 10.9)),
}


def sub_seed(seed: int, run: int) -> int:
    """Seed of run ``run``, independent of the order in which runs execute."""
    return int(np.random.SeedSequence([seed, run]).generate_state(1)[0])


def selection_error_rates(s0_hat: Sequence[int], beta: np.ndarray) -> Tuple[float, float]:
    """False positive and false negative rates of a negative-control selection.

    FPR = |{j: beta_hat_j != 0, beta_j = 0}| / |{j: beta_hat_j != 0}|;
    FNR = |{j: beta_hat_j = 0, beta_j != 0}| / |{j: beta_hat_j = 0}|.
    """
    estimated_zero = np.zeros(beta.shape[0], dtype=bool)
    estimated_zero[np.asarray(s0_hat, dtype=int)] = True
    true_zero = beta == 0
    nonzero_count = int(np.sum(~estimated_zero))
    zero_count = int(np.sum(estimated_zero))
    fpr = np.sum(~estimated_zero & true_zero) / nonzero_count if nonzero_count else 0.0
    fnr = np.sum(estimated_zero & ~true_zero) / zero_count if zero_count else 0.0
    return float(fpr), float(fnr)


def _level_one(dist: PotentialOutcomeDist) -> np.ndarray:
    return np.array([dist.prob(j, 1, x) for j in (1, 2, 3) for x in (1, 2)])


def _failure(e: Exception) -> Dict:
    return {'error': type(e).__name__, 'message': str(e)}


def _table1_run(task: Tuple) -> Dict:
    n, p, seed, config = task
    design = LinearDesign(p=p)
    try:
        optimizer = LinearSEMOptimizer(config)
        data = gen_linear(design, n, seed)
        selection = optimizer.select(optimizer.fit_factors(data))
    except (ParallelOutcomesError, np.linalg.LinAlgError) as e:
        return _failure(e)
    fpr, fnr = selection_error_rates(selection.s0_hat, design.beta)
    return {'fpr': fpr, 'fnr': fnr}


def _table2_run(task: Tuple) -> Dict:
    n, p, seed, config = task
    design = LinearDesign(p=p)
    try:
        optimizer = LinearSEMOptimizer(dict(config, seed=seed))
        data = gen_linear(design, n, seed)
        selection = optimizer.select(optimizer.fit_factors(data))
        effects = optimizer.estimate(data, selection)
    except (ParallelOutcomesError, np.linalg.LinAlgError) as e:
        return _failure(e)
    return {'beta_hat': effects.beta_hat[:4].tolist()}


def _table_s1_run(task: Tuple) -> Dict:
    n, seed, config = task
    try:
        tables = empirical_tables(gen_categorical(n, seed), k_x=2, k_y=(2, 2, 2))
    except ParallelOutcomesError as e:
        return _failure(e)
    optimizer = CategoricalOptimizer(config)
    out: Dict = {'crude': _level_one(crude_estimate(tables)).tolist(), 'errors': {}}

    fit = optimizer.fit(tables)
    if fit['status'] == 'success':
        out['warm_start'] = _level_one(fit['potential_outcomes']).tolist()
    else:
        out['errors']['warm_start'] = fit['error_type']

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    try:
        random_fit = optimizer.fit_from_random_start(tables, rng)
        out['random_start'] = _level_one(g_formula(random_fit.params)).tolist()
    except (ParallelOutcomesError, np.linalg.LinAlgError) as e:
        out['errors']['random_start'] = type(e).__name__
    return out


@dataclass
class ReplicationReport:
    """Monte Carlo summary of one table: one entry per (n, p) cell or estimator.

    ``wall_time`` is logged but left out of ``as_dict`` so one seed always gives one document.
    """
    table: str
    runs: int
    seed: int
    workers: int
    cells: List[Dict] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def failures(self) -> int:
        return int(sum(c.get('failures', 0) for c in self.cells))

    @property
    def attempted(self) -> int:
        return int(sum(c.get('attempted', self.runs) for c in self.cells))

    @property
    def failure_rate(self) -> float:
        return self.failures / self.attempted if self.attempted else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for cell in self.cells:
            base = {k: v for k, v in cell.items() if not isinstance(v, (dict, list))}
            for name, value in cell.get('metrics', {}).items():
                rows.append(dict(base, metric=name, **value))
        return pd.DataFrame(rows)

    def as_dict(self) -> Dict:
        return {'table': self.table, 'runs': self.runs, 'seed': self.seed, 'workers': self.workers,
                'failures': self.failures, 'failure_rate': self.failure_rate,
                'cells': self.cells}


def _execute(worker: Callable[[Tuple], Dict], tasks: List[Tuple], workers: int) -> List[Dict]:
    if workers <= 1:
        return [worker(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _summarize_table1(n: int, p: int, results: List[Dict]) -> Dict:
    ok = [r for r in results if 'error' not in r]
    fpr = np.array([r['fpr'] for r in ok])
    fnr = np.array([r['fnr'] for r in ok])
    published = PUBLISHED_TABLE1.get((n, p))
    return {
        'n': n, 'p': p, 'attempted': len(results), 'failures': len(results) - len(ok),
        'metrics': {
            'FPRx10000': {'estimate': float(fpr.mean() * 1e4) if ok else None,
                          'published': published[0] if published else None},
            'FNRx10000': {'estimate': float(fnr.mean() * 1e4) if ok else None,
                          'published': published[1] if published else None},
        },
    }


def _summarize_table2(n: int, p: int, results: List[Dict]) -> Dict:
    ok = [r for r in results if 'error' not in r]
    truth = LinearDesign(p=p).beta[:4]
    metrics = {}
    published = PUBLISHED_TABLE2.get((n, p))
    if ok:
        errors = np.array([r['beta_hat'] for r in ok]) - truth
        bias = errors.mean(axis=0) * 100
        se = errors.std(axis=0, ddof=1) / np.sqrt(len(ok)) * 100 if len(ok) > 1 else np.full(4, np.nan)
    for k in range(4):
        metrics[f'beta_{k + 1}'] = {
            'truth': float(truth[k]),
            'bias_x100': float(bias[k]) if ok else None,
            'se_x100': float(se[k]) if ok else None,
            'published_bias_x100': published[k][0] if published else None,
            'published_se_x100': published[k][1] if published else None,
        }
    return {'n': n, 'p': p, 'attempted': len(results), 'failures': len(results) - len(ok), 'metrics': metrics}


def _summarize_table_s1(n: int, results: List[Dict]) -> List[Dict]:
    truth = _level_one(g_formula(categorical_design()))
    cells = []
    for estimator in S1_ESTIMATORS:
        draws = [r[estimator] for r in results if estimator in r]
        metrics = {}
        if draws:
            errors = np.array(draws) - truth
            bias = errors.mean(axis=0) * 100
            sd = errors.std(axis=0, ddof=1) * 100 if len(draws) > 1 else np.full(truth.shape, np.nan)
        for k, name in enumerate(S1_ESTIMANDS):
            published = PUBLISHED_TABLE_S1[estimator][k]
            metrics[name] = {
                'truth': float(truth[k]),
                'bias_x100': float(bias[k]) if draws else None,
                'sd_x100': float(sd[k]) if draws else None,
                'published_bias_x100': published[0],
                'published_sd_x100': published[1],
            }
        cells.append({'n': n, 'estimator': estimator, 'attempted': len(results),
                      'failures': len(results) - len(draws), 'metrics': metrics})
    return cells


def replicate(table: str, runs: int, seed: int, workers: int = 1,
              cells: Optional[Iterable[Tuple[int, int]]] = None, n: Optional[int] = None,
              linear_config: Optional[Dict] = None, categorical_config: Optional[Dict] = None) -> ReplicationReport:
    """Run a Monte Carlo table.

    ``cells`` lists (n, p) pairs for the linear tables (default: the full grid
    for table1, (2000, 30) for table2); ``n`` is the sample size for tableS1.
    Per-run failures are counted and never abort the sweep.
    """
    if table not in TABLES:
        raise ConfigError(f"Unknown table '{table}', expected one of {TABLES}")
    if runs < MIN_RUNS:
        raise ConfigError(f"At least {MIN_RUNS} runs are required, got {runs}")
    linear_config = dict(linear_config or {})
    categorical_config = dict(categorical_config or {})
    report = ReplicationReport(table=table, runs=runs, seed=seed, workers=workers)
    started = time.perf_counter()

    if table == 'tableS1':
        size = n or S1_SAMPLE_SIZE
        tasks = [(size, sub_seed(seed, i), categorical_config) for i in range(runs)]
        report.cells = _summarize_table_s1(size, _execute(_table_s1_run, tasks, workers))
    else:
        grid = list(cells) if cells else (
            [(n_, p_) for n_ in GRID_N for p_ in GRID_P] if table == 'table1' else [(2000, 30)])
        worker = _table1_run if table == 'table1' else _table2_run
        summarize = _summarize_table1 if table == 'table1' else _summarize_table2
        for cell_index, (n_, p_) in enumerate(grid):
            tasks = [(n_, p_, sub_seed(seed, cell_index * runs + i), linear_config) for i in range(runs)]
            logger.info(f"{table}: cell n={n_}, p={p_}, {runs} runs")
            report.cells.append(summarize(n_, p_, _execute(worker, tasks, workers)))

    report.wall_time = time.perf_counter() - started
    logger.info(f"{table} finished in {report.wall_time:.1f}s with {report.failures} failed runs")
    return report


class ReplicationManager:
    """Runs the Monte Carlo tables with settings from the replication config."""

    def __init__(self, config: Optional[Dict] = None):
        config = config or {}
        self.runs = int(config.get('runs', 100))
        self.seed = int(config.get('seed', 0))
        self.workers = int(config.get('workers', 1))
        self.cells = config.get('cells')
        self.n = config.get('n')
        self.linear_config = config.get('linear', {})
        self.categorical_config = config.get('categorical', {})

    def run(self, table: str) -> Dict:
        try:
            report = replicate(table, self.runs, self.seed, self.workers,
                               cells=[tuple(c) for c in self.cells] if self.cells else None, n=self.n,
                               linear_config=self.linear_config, categorical_config=self.categorical_config)
        except ParallelOutcomesError as e:
            logger.error(f"Error replicating {table}: {str(e)}")
            return {'status': 'error', 'stage': 'replicate', 'error_type': type(e).__name__,
                    'exit_code': e.exit_code, 'message': str(e), 'details': e.details,
                    'timestamp': datetime.now(timezone.utc).isoformat()}
        return {'status': 'success', 'report': report, 'failure_rate': report.failure_rate,
                'timestamp': datetime.now(timezone.utc).isoformat()}
