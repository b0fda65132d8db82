from .analyzer import (Dataset, FactorFit, fit_factors, population_loadings, residual_covariance,
                       spectral_truncation, threshold_from_spectrum)
from .optimizer import EffectEstimate, LinearSEMOptimizer, bootstrap_ci, estimate_effects
from .selector import (Selection, branch_and_bound, enumerate_rotations, select_negative_controls,
                       selection_objective, sphere_grid_search)

__all__ = [
    'Dataset', 'EffectEstimate', 'FactorFit', 'LinearSEMOptimizer', 'Selection', 'bootstrap_ci',
    'branch_and_bound', 'enumerate_rotations', 'estimate_effects', 'fit_factors', 'population_loadings',
    'residual_covariance', 'select_negative_controls', 'selection_objective', 'spectral_truncation',
    'sphere_grid_search', 'threshold_from_spectrum',
]
