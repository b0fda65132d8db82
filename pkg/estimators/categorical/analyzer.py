from typing import Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from ..errors import BadParams, EmptyStratum
from .models import CategoricalParams, EmpiricalTables, JointTable, PotentialOutcomeDist

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ['x', 'y1', 'y2', 'y3']


def joint_from_arrays(pr_u: np.ndarray, pr_x_given_u: np.ndarray, pr_y: Sequence[np.ndarray]) -> np.ndarray:
    """Unvalidated forward map on raw arrays; the GLS residual loop calls this directly."""
    y1, y2, y3 = pr_y
    return np.einsum('u,xu,aux,bux,cux->xabc', pr_u, pr_x_given_u, y1, y2, y3)


def forward_joint(params: CategoricalParams) -> JointTable:
    """pr(x, y1, y2, y3) = sum_u pr(u) pr(x|u) prod_j pr(y_j|u,x)."""
    if len(params.pr_y_given_ux) != 3:
        raise BadParams(f"forward_joint needs exactly 3 outcomes, got {len(params.pr_y_given_ux)}")
    prob = joint_from_arrays(params.pr_u, params.pr_x_given_u, params.pr_y_given_ux)
    # Absorb the last-ulp drift of the contraction so the table invariant holds exactly.
    prob = prob / prob.sum()
    return JointTable(prob=prob)


def tables_from_joint(joint: JointTable) -> EmpiricalTables:
    """Exact conditioning of a population joint table on X."""
    pr_x = joint.prob.sum(axis=(1, 2, 3))
    if np.any(pr_x <= 0):
        missing = (np.flatnonzero(pr_x <= 0) + 1).tolist()
        raise EmptyStratum(f"Exposure levels {missing} carry no mass", details={'levels': missing})
    return EmpiricalTables(pr_x=pr_x, p123=joint.prob / pr_x[:, None, None, None], n=0)


def _records_array(samples: Union[pd.DataFrame, np.ndarray, Sequence]) -> np.ndarray:
    if isinstance(samples, pd.DataFrame):
        missing = [c for c in RECORD_COLUMNS if c not in samples.columns]
        if missing:
            raise BadParams(f"Sample frame is missing columns {missing}")
        samples = samples[RECORD_COLUMNS].to_numpy()
    records = np.asarray(samples)
    if records.ndim != 2 or records.shape[1] != 4 or records.shape[0] == 0:
        raise BadParams(f"Samples must be a non-empty n x 4 array of labels, got shape {records.shape}")
    if not np.all(np.equal(np.mod(records, 1), 0)):
        raise BadParams("Category labels must be integers")
    return records.astype(int)


def empirical_tables(samples: Union[pd.DataFrame, np.ndarray, Sequence],
                     k_x: Optional[int] = None,
                     k_y: Optional[Sequence[int]] = None) -> EmpiricalTables:
    """Relative-frequency tables from (x, y1, y2, y3) records with 1-based labels.

    Level counts default to the largest label seen in each column.
    """
    records = _records_array(samples)
    observed_max = records.max(axis=0)
    levels = np.array([k_x or observed_max[0]] + list(k_y or observed_max[1:]), dtype=int)
    if np.any(records < 1) or np.any(records > levels):
        raise BadParams("Category labels fall outside the declared level counts",
                        details={'levels': levels.tolist(), 'observed_max': observed_max.tolist(),
                                 'observed_min': records.min(axis=0).tolist()})

    counts = np.zeros(tuple(levels), dtype=float)
    np.add.at(counts, tuple((records - 1).T), 1.0)
    per_x = counts.sum(axis=(1, 2, 3))
    if np.any(per_x == 0):
        empty = (np.flatnonzero(per_x == 0) + 1).tolist()
        raise EmptyStratum(f"No records observed for exposure levels {empty}", details={'levels': empty})

    n = records.shape[0]
    logger.debug(f"empirical_tables: n={n}, levels={levels.tolist()}, per-x counts={per_x.tolist()}")
    return EmpiricalTables(pr_x=per_x / n, p123=counts / per_x[:, None, None, None], n=n)


def crude_estimate(tables: EmpiricalTables) -> PotentialOutcomeDist:
    """Unadjusted pr(y_j | x), the confounded baseline."""
    y1 = tables.p123.sum(axis=(2, 3)).T
    y2 = tables.p23.sum(axis=2).T
    y3 = tables.p23.sum(axis=1).T
    return PotentialOutcomeDist(probs=(y1, y2, y3))


def g_formula(params: CategoricalParams) -> PotentialOutcomeDist:
    """pr{y_j(x)} = sum_u pr(y_j | x, u) pr(u)."""
    return PotentialOutcomeDist(probs=tuple(np.einsum('aux,u->ax', y, params.pr_u)
                                            for y in params.pr_y_given_ux))


def average_causal_effect(dist: PotentialOutcomeDist, level: int = 1,
                          x_treated: int = 2, x_control: int = 1) -> np.ndarray:
    """pr{Y_j(x_treated) = level} - pr{Y_j(x_control) = level} for every outcome j."""
    return np.array([dist.prob(j + 1, level, x_treated) - dist.prob(j + 1, level, x_control)
                     for j in range(len(dist.probs))])


def stratum_factors(params: CategoricalParams, x: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """P(Y2|U,x), pr(U|x) and P(Y3|U,x) for a 0-based exposure level."""
    pr_u_given_x = params.pr_u_given_x()[:, x]
    return params.pr_y_given_ux[1][:, :, x], pr_u_given_x, params.pr_y_given_ux[2][:, :, x]


def reconstruction_error(params: CategoricalParams, tables: EmpiricalTables) -> np.ndarray:
    """Per-x max |P(Y2|U,x) diag(pr(U|x)) P(Y3|U,x)' - P23[x]|."""
    errors = []
    for x in range(tables.k_x):
        b2, du, b3 = stratum_factors(params, x)
        errors.append(float(np.abs(b2 @ np.diag(du) @ b3.T - tables.p23[x]).max()))
    return np.array(errors)
