from .designs import (LinearDesign, categorical_design, counterexample_pair, local_identifiability_case,
                      ordering_violation_case)
from .generator import gen_categorical, gen_linear
from .manager import ReplicationManager, ReplicationReport, replicate, selection_error_rates, sub_seed

__all__ = [
    'LinearDesign', 'ReplicationManager', 'ReplicationReport', 'categorical_design', 'counterexample_pair',
    'gen_categorical', 'gen_linear', 'local_identifiability_case', 'ordering_violation_case', 'replicate',
    'selection_error_rates', 'sub_seed',
]
