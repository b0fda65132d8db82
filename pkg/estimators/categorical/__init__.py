from .analyzer import (average_causal_effect, crude_estimate, empirical_tables, forward_joint, g_formula,
                       reconstruction_error, tables_from_joint)
from .identification import check_conditions, identify_two_outcomes, plugin_identify
from .models import CategoricalParams, EmpiricalTables, JointTable, PotentialOutcomeDist
from .optimizer import CategoricalOptimizer, GLSFit, gls_refine, objective, random_start

__all__ = [
    'CategoricalOptimizer', 'CategoricalParams', 'EmpiricalTables', 'GLSFit', 'JointTable', 'PotentialOutcomeDist',
    'average_causal_effect', 'check_conditions', 'crude_estimate', 'empirical_tables', 'forward_joint',
    'g_formula', 'gls_refine', 'identify_two_outcomes', 'objective', 'plugin_identify', 'random_start',
    'reconstruction_error', 'tables_from_joint',
]
