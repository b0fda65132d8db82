"""Causal effect estimation with parallel outcomes under unmeasured confounding."""

from .errors import ParallelOutcomesError

__version__ = '1.0.0'
__all__ = ['ParallelOutcomesError', '__version__']
