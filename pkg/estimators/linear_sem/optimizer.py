from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence
import logging

import numpy as np

from ..errors import (CollinearityWarning, FirstStageSingular, LinearSEMError, NoNegativeControls,
                      ParallelOutcomesError, SingularSystem)
from ..numerics import kfold_split, ridge_from_gram, solve_ols
from .analyzer import Dataset, FactorFit, fit_factors
from .selector import DEFAULT_M, Selection, select_negative_controls

logger = logging.getLogger(__name__)

FIRST_STAGE_MAX_COND = 1e12
COLLINEARITY_COND = 1e10
GRID_SIZE = 50
DEFAULT_FOLDS = 10


@dataclass
class EffectEstimate:
    """Causal effects of X on every outcome, exactly zero on the negative controls.

    When some outcomes mediate others these are total effects.
    """
    beta_hat: np.ndarray
    s0_hat: np.ndarray
    lambdas: Dict[int, float] = field(default_factory=dict)
    intervals: Optional[np.ndarray] = None
    level: Optional[float] = None
    diagnostics: Dict = field(default_factory=dict)

    def table(self, names: Optional[Sequence[str]] = None) -> List[Dict]:
        names = names or [f'y{j + 1}' for j in range(self.beta_hat.shape[0])]
        rows = []
        for j, name in enumerate(names):
            row = {'outcome': name, 'beta_hat': float(self.beta_hat[j]),
                   'negative_control': bool(j in set(self.s0_hat.tolist())),
                   'lambda': self.lambdas.get(j)}
            if self.intervals is not None:
                row['lower'], row['upper'] = float(self.intervals[j, 0]), float(self.intervals[j, 1])
            rows.append(row)
        return rows


def default_lambda_grid(design: np.ndarray, num_controls: int, size: int = GRID_SIZE) -> np.ndarray:
    scale = float(np.trace(design.T @ design)) / (1 + num_controls)
    return np.logspace(-4, 4, size) * scale


def cross_validate_lambda(design: np.ndarray, target: np.ndarray, grid: Sequence[float], folds: int,
                          seed: Optional[int]) -> float:
    """Grid value with the smallest held-out squared error of the masked ridge fit."""
    grid = np.asarray(grid, dtype=float)
    mask = np.ones(design.shape[1])
    mask[0] = 0.0
    if grid.size == 1:
        return float(grid[0])

    gram = design.T @ design
    moment = design.T @ target
    errors = np.zeros(grid.size)
    for test in kfold_split(design.shape[0], folds, seed):
        held, held_y = design[test], target[test]
        train_gram = gram - held.T @ held
        train_moment = moment - held.T @ held_y
        for i, lam in enumerate(grid):
            if not np.isfinite(errors[i]):
                continue
            try:
                coef = ridge_from_gram(train_gram, train_moment, lam, mask)
            except SingularSystem:
                errors[i] = np.inf
                continue
            errors[i] += float(np.sum((held_y - held @ coef) ** 2))
    if not np.any(np.isfinite(errors)):
        raise SingularSystem("Every penalty on the grid gives a singular second stage",
                             details={'grid': grid.tolist()})
    best = int(np.argmin(errors))
    logger.debug(f"Cross-validated lambda={grid[best]:.4g} (error {errors[best]:.4g})")
    return float(grid[best])


def collinearity_condition(x: np.ndarray, fitted: np.ndarray, rank: int) -> float:
    """Condition number of (x, leading directions of W_hat), both scaled to unit length.

    Only the top ``rank`` left singular vectors of W_hat enter: the fitted
    controls depend on (X, Z) through the latent confounders, and the trailing
    directions are first-stage noise that spans X whenever |S0| > |T|.
    """
    rank = min(rank, fitted.shape[1])
    if rank < 1:
        return 1.0
    u, _, _ = np.linalg.svd(fitted, full_matrices=False)
    return float(np.linalg.cond(np.column_stack([x / np.linalg.norm(x), u[:, :rank]])))


def _confounder_rank(sel: Selection, num_controls: int, num_others: int) -> int:
    if sel.method != 'fixed':
        return sel.w_star.shape[0] - 1
    return min(num_controls, num_others)


def estimate_effects(data: Dataset, sel: Selection, lambda_grid: Optional[Sequence[float]] = None,
                     folds: int = DEFAULT_FOLDS, seed: Optional[int] = None,
                     fixed_lambdas: Optional[Dict[int, float]] = None,
                     confounder_rank: Optional[int] = None) -> EffectEstimate:
    """Two-stage least squares with the selected outcomes as negative controls.

    For each target l the controls W are projected on (X, other targets), and
    Y_l is regressed on (X, W_hat) with a ridge penalty on the W_hat block.
    ``confounder_rank`` sets how many directions of W_hat the collinearity
    check compares X against; by default the latent dimension of a searched
    selection, or min(|S0|, |T| - 1) for a fixed one.
    """
    data = data.center()
    s0 = np.asarray(sel.s0_hat, dtype=int)
    if s0.size == 0:
        raise NoNegativeControls("No negative control outcomes were selected")
    targets = np.setdiff1d(np.arange(data.p), s0)
    beta = np.zeros(data.p)
    estimate = EffectEstimate(beta_hat=beta, s0_hat=s0,
                              diagnostics={'first_stage_condition': {}, 'collinearity_condition': {},
                                           'warnings': []})
    if targets.size == 0:
        logger.info("Every outcome is a negative control; all effects are zero")
        return estimate

    x, y = data.x, data.y
    controls = y[:, s0]
    mask = np.r_[0.0, np.ones(s0.size)]
    for target in targets:
        others = targets[targets != target]
        first = np.column_stack([x, y[:, others]])
        cond = float(np.linalg.cond(first.T @ first))
        estimate.diagnostics['first_stage_condition'][int(target)] = cond
        if not np.isfinite(cond) or cond > FIRST_STAGE_MAX_COND:
            raise FirstStageSingular(f"First stage for outcome {target + 1} is singular (cond={cond:.3e})",
                                     details={'outcome': int(target) + 1, 'condition_number': cond})
        fitted = first @ solve_ols(first, controls)
        design = np.column_stack([x, fitted])

        rank = confounder_rank if confounder_rank is not None else _confounder_rank(sel, s0.size, others.size)
        collinearity = collinearity_condition(x, fitted, rank)
        estimate.diagnostics['collinearity_condition'][int(target)] = collinearity
        if collinearity > COLLINEARITY_COND:
            msg = (f"X is nearly a linear combination of the fitted controls for outcome {target + 1} "
                   f"(cond={collinearity:.3e})")
            estimate.diagnostics['warnings'].append(CollinearityWarning(msg))
            logger.warning(msg)

        if fixed_lambdas is not None and int(target) in fixed_lambdas:
            lam = fixed_lambdas[int(target)]
        else:
            grid = lambda_grid if lambda_grid is not None else default_lambda_grid(design, s0.size)
            lam = cross_validate_lambda(design, y[:, target], grid, folds, seed)
        coef = ridge_from_gram(design.T @ design, design.T @ y[:, target], lam, mask)
        beta[target] = coef[0]
        estimate.lambdas[int(target)] = float(lam)

    logger.info(f"Estimated effects for {targets.size} outcomes with {s0.size} negative controls")
    return estimate


def bootstrap_ci(data: Dataset, sel: Selection, level: float = 0.95, B: int = 500, seed: int = 0,
                 lambdas: Optional[Dict[int, float]] = None, lambda_grid: Optional[Sequence[float]] = None,
                 folds: int = DEFAULT_FOLDS) -> Dict:
    """Percentile intervals from a pairs bootstrap with the selection held fixed.

    Penalties come from ``lambdas`` (normally the full-sample fit) so every
    resample solves the same problem; failed resamples are dropped and counted.
    """
    if B < 100:
        raise LinearSEMError(f"Bootstrap needs at least 100 resamples, got {B}")
    if not 0 < level < 1:
        raise LinearSEMError(f"Confidence level must lie in (0, 1), got {level}")
    if lambdas is None:
        lambdas = estimate_effects(data, sel, lambda_grid, folds, seed).lambdas

    rng = np.random.default_rng(seed)
    draws = []
    failures = 0
    for _ in range(B):
        rows = rng.integers(0, data.n, size=data.n)
        try:
            draws.append(estimate_effects(data.take_rows(rows), sel, fixed_lambdas=lambdas).beta_hat)
        except (ParallelOutcomesError, np.linalg.LinAlgError) as e:
            failures += 1
            logger.debug(f"Bootstrap resample failed: {str(e)}")
    if not draws:
        raise SingularSystem(f"All {B} bootstrap resamples failed", details={'failures': failures})

    alpha = (1.0 - level) / 2.0
    intervals = np.quantile(np.vstack(draws), [alpha, 1.0 - alpha], axis=0).T
    logger.info(f"Bootstrap: {len(draws)} resamples kept, {failures} failed")
    return {'intervals': intervals, 'level': level, 'resamples': len(draws), 'failures': failures}


class LinearSEMOptimizer:
    """Factor fit, negative-control selection and effect estimation on one dataset."""

    def __init__(self, config: Optional[Dict] = None):
        config = config or {}
        self.num_factors = config.get('num_factors')
        self.M = float(config.get('M', DEFAULT_M))
        self.method = config.get('method', 'enumeration')
        self.folds = int(config.get('folds', DEFAULT_FOLDS))
        self.lambda_grid = config.get('lambda_grid')
        self.seed = config.get('seed')
        self.bootstrap = int(config.get('bootstrap', 0))
        self.level = float(config.get('level', 0.95))

    def fit_factors(self, data: Dataset) -> FactorFit:
        return fit_factors(data, self.num_factors)

    def select(self, fit: FactorFit) -> Selection:
        return select_negative_controls(fit, M=self.M, method=self.method)

    def estimate(self, data: Dataset, selection: Selection) -> EffectEstimate:
        estimate = estimate_effects(data, selection, self.lambda_grid, self.folds, self.seed)
        if self.bootstrap:
            boot = bootstrap_ci(data, selection, self.level, self.bootstrap,
                                self.seed if self.seed is not None else 0, lambdas=estimate.lambdas)
            estimate.intervals = boot['intervals']
            estimate.level = self.level
            estimate.diagnostics['bootstrap'] = {k: boot[k] for k in ('resamples', 'failures')}
        return estimate

    def run(self, data: Dataset) -> Dict:
        stage = 'factors'
        result: Dict = {'n': data.n, 'p': data.p}
        try:
            result['factors'] = self.fit_factors(data)
            stage = 'selection'
            result['selection'] = self.select(result['factors'])
            stage = 'effects'
            result['effects'] = self.estimate(data, result['selection'])
        except ParallelOutcomesError as e:
            logger.error(f"Error in linear estimation at stage {stage}: {str(e)}")
            result.update({'status': 'error', 'stage': stage, 'error_type': type(e).__name__,
                           'exit_code': e.exit_code, 'message': str(e), 'details': e.details,
                           'timestamp': datetime.now(timezone.utc).isoformat()})
            return result
        result.update({'status': 'success', 'timestamp': datetime.now(timezone.utc).isoformat()})
        return result
