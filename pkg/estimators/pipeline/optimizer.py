from datetime import datetime, timezone
from typing import Dict, Optional
import logging

from ..errors import ParallelOutcomesError, PipelineError
from ..linear_sem.optimizer import LinearSEMOptimizer
from .analyzer import (DEFAULT_THRESHOLD_MULT, RawTable, check_error_diagonality, is_degenerate_exposure,
                       residualize, screen_outcomes)

logger = logging.getLogger(__name__)


def run_linear_workflow(raw: RawTable, config: Optional[Dict] = None) -> Dict:
    """Residualize, screen, fit factors, check diagonality, select controls and estimate effects.

    Returns a status dictionary; on failure it keeps every stage that finished
    and names the stage that failed.
    """
    config = config or {}
    optimizer = LinearSEMOptimizer(config)
    result: Dict = {'n': raw.n, 'p': raw.p, 'q': raw.q, 'dropped_rows': raw.dropped_rows,
                    'outcomes': list(raw.outcomes)}
    stage = 'residualize'
    try:
        data = residualize(raw)
        if is_degenerate_exposure(data):
            raise PipelineError(f"Exposure '{raw.exposure}' has no variation left after adjusting for covariates")

        stage = 'screen'
        if config.get('screen', True):
            screening = screen_outcomes(data)
            result['screening'] = screening.statistics
            data = data.take_outcomes(screening.retained)
        result['analyzed_outcomes'] = list(data.outcome_names)

        stage = 'factors'
        fit = optimizer.fit_factors(data)
        result['factors'] = fit

        stage = 'diagonality'
        result['diagonality'] = check_error_diagonality(
            data, fit, float(config.get('threshold_mult', DEFAULT_THRESHOLD_MULT)),
            pervasive=bool(config.get('pervasive_threshold', False)))

        stage = 'selection'
        selection = optimizer.select(fit)
        result['selection'] = selection

        stage = 'effects'
        result['effects'] = optimizer.estimate(data, selection)
    except ParallelOutcomesError as e:
        logger.error(f"Error in linear workflow at stage {stage}: {str(e)}")
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

    logger.info(f"Linear workflow finished: {len(result['analyzed_outcomes'])} outcomes, "
                f"{len(selection.s0_hat)} negative controls")
    result.update({'status': 'success', 'timestamp': datetime.now(timezone.utc).isoformat()})
    return result
