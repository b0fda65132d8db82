from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit, logit, softmax

from ..errors import OptimFailure, ParallelOutcomesError
from .analyzer import crude_estimate, g_formula, joint_from_arrays
from .identification import EPS_RANK, IMAG_REL_TOL, ORDER_TOL, check_conditions, plugin_identify
from .models import CategoricalParams, EmpiricalTables

logger = logging.getLogger(__name__)

MAX_ITER = 500
GTOL = 1e-10
# Probabilities are kept this far from 0 and 1 when mapped to log-odds.
PROB_FLOOR = 1e-10
EXACT_FIT = 1e-24


def _reference_logits(p: np.ndarray) -> np.ndarray:
    """Log-odds of every level against the last one along axis 0."""
    logp = np.log(np.clip(p, PROB_FLOOR, None))
    return logp[:-1] - logp[-1:]


def _reference_softmax(z: np.ndarray) -> np.ndarray:
    pad = np.zeros((1,) + z.shape[1:])
    return softmax(np.concatenate([z, pad], axis=0), axis=0)


class SimplexParameterization:
    """Unconstrained coordinates for a CategoricalParams family.

    Every simplex column becomes log-odds against its last level. pr(Y1=1|u,x)
    is a base log-odds per x plus cumulative positive increments in u, so any
    coordinate vector decodes to a model that is strictly increasing in u.
    """

    def __init__(self, k_u: int, k_x: int, k_y: Sequence[int]):
        self.k_u = k_u
        self.k_x = k_x
        self.k_y = tuple(k_y)
        self._shapes: List[Tuple[int, ...]] = [(k_u - 1,), (k_x - 1, k_u)]
        k1 = self.k_y[0]
        if k1 >= 2:
            self._shapes += [(k_x,), (k_u - 1, k_x)]
        if k1 >= 3:
            self._shapes.append((k1 - 2, k_u, k_x))
        self._shapes += [(k - 1, k_u, k_x) for k in self.k_y[1:]]

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self._shapes))

    def pack(self, params: CategoricalParams) -> np.ndarray:
        parts = [_reference_logits(params.pr_u), _reference_logits(params.pr_x_given_u)]
        y1 = params.pr_y_given_ux[0]
        if self.k_y[0] >= 2:
            odds = logit(np.clip(y1[0], PROB_FLOOR, 1.0 - PROB_FLOOR))
            parts += [odds[0], np.log(np.maximum(np.diff(odds, axis=0), PROB_FLOOR))]
        if self.k_y[0] >= 3:
            rest = np.clip(1.0 - y1[0], PROB_FLOOR, None)
            parts.append(_reference_logits(y1[1:] / rest[None]))
        parts += [_reference_logits(y) for y in params.pr_y_given_ux[1:]]
        return np.concatenate([np.ravel(p) for p in parts])

    def unpack_arrays(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Tuple[np.ndarray, ...]]:
        pieces = []
        cursor = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            pieces.append(theta[cursor:cursor + size].reshape(shape))
            cursor += size
        pieces = iter(pieces)

        pr_u = _reference_softmax(next(pieces))
        pr_x_given_u = _reference_softmax(next(pieces))
        k1 = self.k_y[0]
        if k1 == 1:
            y1 = np.ones((1, self.k_u, self.k_x))
        else:
            base, steps = next(pieces), next(pieces)
            p1 = expit(np.cumsum(np.vstack([base[None, :], np.exp(steps)]), axis=0))
            shares = _reference_softmax(next(pieces)) if k1 >= 3 else np.ones((1, self.k_u, self.k_x))
            y1 = np.concatenate([p1[None], shares * (1.0 - p1)[None]], axis=0)
        others = tuple(_reference_softmax(next(pieces)) for _ in self.k_y[1:])
        return pr_u, pr_x_given_u, (y1,) + others

    def unpack(self, theta: np.ndarray) -> CategoricalParams:
        pr_u, pr_x_given_u, pr_y = self.unpack_arrays(theta)
        return CategoricalParams(pr_u=pr_u, pr_x_given_u=pr_x_given_u, pr_y_given_ux=pr_y)


@dataclass
class GLSFit:
    params: CategoricalParams
    objective: float
    warm_objective: float
    iterations: int
    status: str
    message: str = ''

    @property
    def optim_failure(self) -> bool:
        return self.status == 'optim_failure'


def objective(params: CategoricalParams, tables: EmpiricalTables) -> float:
    """Unweighted squared distance between observed and model pr(x, y1, y2, y3)."""
    model = joint_from_arrays(params.pr_u, params.pr_x_given_u, params.pr_y_given_ux)
    return float(np.sum((tables.joint() - model) ** 2))


def gls_refine(tables: EmpiricalTables, warm: CategoricalParams, max_iter: int = MAX_ITER,
               gtol: float = GTOL, strict: bool = False) -> GLSFit:
    """Least-squares refinement of a warm start under simplex and monotone constraints.

    The returned objective never exceeds the warm objective; when no iterate
    improves on it the warm start comes back with status ``optim_failure``
    (or OptimFailure is raised if ``strict``).
    """
    warm_objective = objective(warm, tables)
    if warm_objective <= EXACT_FIT:
        logger.debug(f"gls_refine: warm start already fits (objective={warm_objective:.3e})")
        return GLSFit(params=warm, objective=warm_objective, warm_objective=warm_objective,
                      iterations=0, status='fixed_point')

    coder = SimplexParameterization(warm.k_u, warm.k_x, warm.k_y)
    target = tables.joint().ravel()

    def residuals(theta):
        return joint_from_arrays(*coder.unpack_arrays(theta)).ravel() - target

    theta0 = coder.pack(warm)
    method = 'lm' if target.size >= theta0.size else 'trf'
    try:
        result = least_squares(residuals, theta0, method=method, gtol=gtol, ftol=1e-12, xtol=1e-12,
                               max_nfev=max_iter * (theta0.size + 1))
        refined = coder.unpack(result.x)
        refined_objective = objective(refined, tables)
        iterations, message = int(result.nfev), str(result.message)
    except (ValueError, np.linalg.LinAlgError, ParallelOutcomesError) as e:
        refined, refined_objective, iterations, message = None, np.inf, 0, str(e)

    logger.debug(f"gls_refine ({method}): objective {warm_objective:.6e} -> {refined_objective:.6e} "
                 f"after {iterations} evaluations")
    if refined is None or not refined_objective <= warm_objective:
        msg = f"No iterate improved on the warm start (objective {warm_objective:.6e}): {message}"
        if strict:
            raise OptimFailure(msg, details={'warm_objective': warm_objective, 'best_objective': refined_objective})
        logger.warning(msg)
        return GLSFit(params=warm, objective=warm_objective, warm_objective=warm_objective,
                      iterations=iterations, status='optim_failure', message=message)

    return GLSFit(params=refined, objective=refined_objective, warm_objective=warm_objective,
                  iterations=iterations, status='converged', message=message)


def random_start(k_u: int, k_x: int, k_y: Sequence[int], rng: np.random.Generator) -> CategoricalParams:
    """Uniform draws normalized per simplex, columns of Y1 ordered so pr(Y1=1|u,x) increases in u."""
    def column_simplex(shape):
        draws = rng.uniform(size=shape)
        return draws / draws.sum(axis=0, keepdims=True)

    pr_u = column_simplex((k_u,))
    pr_x_given_u = column_simplex((k_x, k_u))
    outcomes = [column_simplex((k, k_u, k_x)) for k in k_y]
    y1 = outcomes[0]
    for x in range(k_x):
        y1[:, :, x] = y1[:, np.argsort(y1[0, :, x]), x]
    return CategoricalParams(pr_u=pr_u, pr_x_given_u=pr_x_given_u, pr_y_given_ux=tuple(outcomes))


class CategoricalOptimizer:
    """Runs crude, plug-in and refined estimation on one set of tables."""

    def __init__(self, config: Optional[Dict] = None):
        config = config or {}
        self.eps_rank = float(config.get('eps_rank', EPS_RANK))
        self.imag_rel_tol = float(config.get('imag_rel_tol', IMAG_REL_TOL))
        self.order_tol = float(config.get('order_tol', ORDER_TOL))
        self.max_iter = int(config.get('max_iter', MAX_ITER))
        self.gtol = float(config.get('gtol', GTOL))

    def fit(self, tables: EmpiricalTables, rng: Optional[np.random.Generator] = None) -> Dict:
        """Conditions, crude baseline, plug-in warm start and GLS refinement.

        With ``rng`` the refinement starts from a random point instead of the
        plug-in solution.
        """
        stage = 'conditions'
        result: Dict = {'n': tables.n}
        try:
            result['conditions'] = check_conditions(tables, self.eps_rank, self.imag_rel_tol, self.order_tol)
            stage = 'crude'
            result['crude'] = crude_estimate(tables)
            if rng is None:
                stage = 'plugin'
                warm, diagnostics = plugin_identify(tables, self.eps_rank, self.imag_rel_tol, self.order_tol)
                result['plugin'] = warm
                result['plugin_outcomes'] = g_formula(warm)
                result['diagnostics'] = diagnostics
            else:
                stage = 'random_start'
                warm = random_start(tables.k_y[1], tables.k_x, tables.k_y, rng)
            stage = 'gls'
            fit = gls_refine(tables, warm, self.max_iter, self.gtol)
            result['refined'] = fit
            result['potential_outcomes'] = g_formula(fit.params)
        except ParallelOutcomesError as e:
            logger.error(f"Error fitting categorical model at stage {stage}: {str(e)}")
            result.update({
                'status': 'error',
                'stage': stage,
                'error_type': type(e).__name__,
                'exit_code': e.exit_code,
                'message': str(e),
                'details': e.details,
                'timestamp': datetime.now(timezone.utc).isoformat(),
            })
            return result

        logger.info(f"Categorical fit finished: n={tables.n}, GLS status={fit.status}, "
                    f"objective={fit.objective:.3e}")
        result.update({'status': 'success', 'timestamp': datetime.now(timezone.utc).isoformat()})
        return result

    def fit_from_random_start(self, tables: EmpiricalTables, rng: np.random.Generator) -> GLSFit:
        start = random_start(tables.k_y[1], tables.k_x, tables.k_y, rng)
        return gls_refine(tables, start, self.max_iter, self.gtol)
