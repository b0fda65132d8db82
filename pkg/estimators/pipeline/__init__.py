from .analyzer import (DiagonalityReport, RawTable, ScreeningResult, check_error_diagonality,
                       is_degenerate_exposure, residualize, screen_outcomes, threshold_rate)
from .optimizer import run_linear_workflow

__all__ = [
    'DiagonalityReport', 'RawTable', 'ScreeningResult', 'check_error_diagonality', 'is_degenerate_exposure',
    'residualize', 'run_linear_workflow', 'screen_outcomes', 'threshold_rate',
]
